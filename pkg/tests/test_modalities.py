import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from anomaly_nav import modalities as M
from anomaly_nav.errors import DimensionError, UsageError, ValidationError

# camera z (forward) onto gravity x, camera x (right) onto -y, camera y (down) onto -z
Z_TO_X = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])


def rot_z(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]])


def pitched(pitch_deg):
    """Forward-looking camera tilted ``pitch_deg`` below the horizon."""
    a = math.radians(pitch_deg)
    # forward = (cos a, 0, -sin a), right = (0, -1, 0), down = forward x right
    fwd = np.array([math.cos(a), 0.0, -math.sin(a)])
    right = np.array([0.0, -1.0, 0.0])
    down = np.cross(fwd, right)
    return np.stack([right, down, fwd], axis=1)


def plane_depth(K, R, h, w, normal, offset):
    """Analytic depth of the plane ``normal . p = offset`` along each pixel ray."""
    normal = np.asarray(normal, float) / np.linalg.norm(normal)
    depth = np.zeros((h, w))
    for v in range(h):
        for u in range(w):
            ray = R @ np.array([(u - K.cx) / K.fx, (v - K.cy) / K.fy, 1.0])
            depth[v, u] = offset / (normal @ ray)
    return depth


# ---------------------------------------------------------------- backproject


def test_principal_point_identity():
    K = M.CameraIntrinsics(100, 100, 50, 50)
    depth = np.zeros((101, 101))
    depth[50, 50] = 2.0
    p, ok = M.backproject(depth, K, np.eye(3))
    np.testing.assert_allclose(p[50, 50], [0, 0, 2])
    assert ok.sum() == 1


def test_principal_point_rotated_onto_x():
    K = M.CameraIntrinsics(100, 100, 50, 50)
    depth = np.full((101, 101), 2.0)
    p, _ = M.backproject(depth, K, Z_TO_X)
    np.testing.assert_allclose(p[50, 50], [2, 0, 0], atol=1e-12)


def test_off_centre_pixel():
    K = M.CameraIntrinsics(100, 100, 50, 50)
    p, _ = M.backproject(np.ones((80, 80)), K, np.eye(3))
    np.testing.assert_allclose(p[50, 60], [0.1, 0.0, 1.0], atol=1e-12)


def test_invalid_rotation_rejected():
    K = M.CameraIntrinsics(100, 100, 50, 50)
    for R in (np.diag([1.0, 1.0, -1.0]), np.eye(3) * 1.01, np.ones((2, 2))):
        with pytest.raises(ValidationError):
            M.backproject(np.ones((4, 4)), K, R)


def test_bad_intrinsics_and_depth_shape():
    with pytest.raises(ValidationError):
        M.CameraIntrinsics(0, 100, 1, 1)
    with pytest.raises(DimensionError):
        M.backproject(np.ones((4, 4, 1)), M.CameraIntrinsics(1, 1, 0, 0), np.eye(3))


def test_invalid_depth_propagates():
    depth = np.array([[1.0, 0.0], [np.nan, -2.0]])
    valid = np.array([[True, True], [True, True]])
    _, ok = M.backproject(depth, M.CameraIntrinsics(1, 1, 0, 0), np.eye(3), valid)
    assert ok.tolist() == [[True, False], [False, False]]
    _, ok = M.backproject(np.ones((2, 2)), M.CameraIntrinsics(1, 1, 0, 0), np.eye(3), ~np.eye(2, dtype=bool))
    assert ok.tolist() == [[False, True], [True, False]]


def test_reproject_round_trip(rng):
    K = M.CameraIntrinsics(420.0, 415.0, 211.3, 119.8)
    R = pitched(27.0)
    depth = rng.uniform(0.3, 12.0, (60, 80))
    p, ok = M.backproject(depth, K, R)
    u, v, d = M.reproject(p, K, R)
    vv, uu = np.mgrid[0:60, 0:80]
    assert ok.all()
    assert np.abs(u - uu).max() < 1e-4 and np.abs(v - vv).max() < 1e-4
    assert np.abs(d - depth).max() < 1e-4


# ---------------------------------------------------------------- G channels


def test_gravity_depth_examples():
    g = M.gravity_align_depth(np.array([[0, 0, 2.0], [3, 4, 1.0]]))
    np.testing.assert_allclose(g, [[0, 2], [5, 1]])


def test_ground_plane_channels_match_per_pixel_oracle():
    K = M.CameraIntrinsics(60.0, 60.0, 31.5, 23.5)
    R = pitched(30.0)
    depth = plane_depth(K, R, 48, 64, (0, 0, 1), -0.7)
    geo = M.derive_geometry(depth, K, R)
    for v in range(48):
        for u in range(64):
            ray = np.array([(u - K.cx) / K.fx, (v - K.cy) / K.fy, 1.0]) * depth[v, u]
            p = R @ ray
            assert geo.g[v, u, 0] == pytest.approx(math.sqrt(p[0] ** 2 + p[1] ** 2), abs=1e-12)
            assert geo.g[v, u, 1] == pytest.approx(p[2], abs=1e-12)
    # every ground point lies 0.7 m below the camera
    np.testing.assert_allclose(geo.g[..., 1], -0.7, atol=1e-9)


@given(st.floats(0, 2 * math.pi), st.lists(st.floats(-50, 50), min_size=3, max_size=3))
def test_gravity_depth_invariant_to_yaw(angle, p):
    p = np.asarray(p)
    a = M.gravity_align_depth(p)
    b = M.gravity_align_depth(rot_z(angle) @ p)
    np.testing.assert_allclose(a, b, atol=1e-6)


# ---------------------------------------------------------------- normals


def test_horizontal_ground_normals_point_up():
    K = M.CameraIntrinsics(60.0, 60.0, 31.5, 23.5)
    R = pitched(90.0)  # straight down
    depth = np.full((48, 64), 1.5)
    pts, ok = M.backproject(depth, K, R)
    normals, nok = M.surface_normals(pts, ok)
    inner = (slice(2, -2), slice(2, -2))
    assert nok[inner].all()
    np.testing.assert_allclose(normals[inner], np.broadcast_to([0, 0, 1.0], normals[inner].shape), atol=1e-4)


def ramp_angles(window=5):
    K = M.CameraIntrinsics(50.0, 50.0, 31.5, 31.5)
    R = pitched(60.0)
    # slope rising away from the camera, through the point 2 m along the optical axis
    n = np.array([-math.sin(math.radians(45)), 0, math.cos(math.radians(45))])
    anchor = R @ np.array([0, 0, 2.0])
    depth = plane_depth(K, R, 64, 64, n, float(n @ anchor))
    assert depth.min() > 0
    geo = M.derive_geometry(depth, K, R, window=window)
    return geo


def test_ramp_is_45_degrees():
    geo = ramp_angles()
    inner = (slice(3, -3), slice(3, -3))
    deg = np.degrees(geo.a[inner])
    assert geo.normal_valid[inner].all()
    assert np.abs(deg - 45.0).max() < 2.0


def test_noisy_plane_mean_angular_error():
    # wide field of view so a 5x5 window spans a useful baseline at 1% noise
    K = M.CameraIntrinsics(40.0, 40.0, 31.5, 31.5)
    R = pitched(45.0)
    clean = plane_depth(K, R, 64, 64, (0, 0, 1), -0.75)
    errs = []
    for seed in range(100):
        r = np.random.default_rng(seed)
        noisy = clean * (1 + 0.01 * r.standard_normal(clean.shape))
        pts, ok = M.backproject(noisy, K, R)
        n, nok = M.surface_normals(pts, ok)
        inner = nok.copy()
        inner[:2] = inner[-2:] = False
        inner[:, :2] = inner[:, -2:] = False
        cosang = np.clip(n[inner] @ np.array([0, 0, 1.0]), -1, 1)
        errs.append(np.degrees(np.arccos(cosang)).mean())
    assert np.mean(errs) < 5.0


def test_degenerate_neighbourhood_is_invalid():
    # a single valid pixel cannot support a plane
    depth = np.zeros((9, 9))
    depth[4, 4] = 1.0
    pts, ok = M.backproject(depth, M.CameraIntrinsics(10, 10, 4, 4), np.eye(3))
    _, nok = M.surface_normals(pts, ok)
    assert not nok.any()


def test_collinear_points_are_invalid():
    # depth valid only on one image row: all points on a line
    depth = np.zeros((9, 9))
    depth[4, :] = 2.0
    pts, ok = M.backproject(depth, M.CameraIntrinsics(10, 10, 4, 4), np.eye(3))
    _, nok = M.surface_normals(pts, ok, window=3)
    assert not nok.any()


def test_gravity_normal_examples():
    np.testing.assert_allclose(M.gravity_align_normals(np.array([0, 0, 1.0])), [0, 1])
    np.testing.assert_allclose(M.gravity_align_normals(np.array([1, 0, 0.0])), [1, 0])


@given(st.lists(st.floats(-1, 1), min_size=3, max_size=3).filter(lambda v: np.linalg.norm(v) > 1e-3))
def test_normal_channels_have_unit_norm(v):
    n = np.asarray(v) / np.linalg.norm(v)
    h, vert = M.gravity_align_normals(n)
    assert abs(h * h + vert * vert - 1) < 1e-6
    assert vert >= 0


@given(st.lists(st.floats(-1, 1), min_size=3, max_size=3).filter(lambda v: np.linalg.norm(v) > 1e-3))
def test_angle_ignores_normal_sign(v):
    n = np.asarray(v) / np.linalg.norm(v)
    a, _ = M.normal_angle(M.gravity_align_normals(n))
    b, _ = M.normal_angle(M.gravity_align_normals(-n))
    assert a == b
    assert 0 <= a <= math.pi / 2


def test_angle_examples():
    a, ok = M.normal_angle(np.array([[0, 1.0], [1, 0.0], [math.sqrt(0.5), math.sqrt(0.5)], [0, 0]]))
    np.testing.assert_allclose(a[:3], [math.pi / 2, 0, math.pi / 4])
    assert ok.tolist() == [True, True, True, False]


# ---------------------------------------------------------------- stacks


@pytest.mark.parametrize("code,c", [("RGB+D", 4), ("RGB+G+N", 7), ("D+A", 2), ("RGB", 3), (M.ALL, 9)])
def test_channel_counts(code, c):
    assert M.channel_count(code) == c


def test_code_parsing():
    assert M.canonical("n+rgb+G") == "RGB+G+N"
    for bad in ("RGB+IR", "", "D+D"):
        with pytest.raises(UsageError):
            M.parse_code(bad)


def stack_for(code, h=40, w=48):
    K = M.CameraIntrinsics(40.0, 40.0, (w - 1) / 2, (h - 1) / 2)
    R = pitched(35.0)
    depth = plane_depth(K, R, h, w, (0, 0, 1), -0.7)
    rgb = np.random.default_rng(0).integers(0, 256, (h, w, 3), dtype=np.uint8)
    return M.build_stack(rgb, depth, K, R, code)


def test_stack_layout_and_normalisation():
    s = stack_for(M.ALL)
    sl = M.channel_slices(M.ALL)
    assert s.data.dtype == np.float32 and s.data.shape == (40, 48, 9)
    assert 0 <= s.data[..., sl["RGB"]].min() and s.data[..., sl["RGB"]].max() <= 1
    np.testing.assert_allclose(s.data[..., sl["G"]][..., 1][s.valid], -0.07, atol=1e-6)
    d = s.data[..., sl["D"]]
    assert d.min() >= 0 and d.max() <= 1
    a = s.data[..., sl["A"]][s.valid]
    np.testing.assert_allclose(a, 1.0, atol=1e-4)


def test_select_subset_matches_direct_build():
    full = stack_for(M.ALL)
    direct = stack_for("D+A")
    np.testing.assert_array_equal(full.select("D+A").data, direct.data)


def test_invalid_pixels_zeroed_and_flagged():
    K = M.CameraIntrinsics(40.0, 40.0, 23.5, 19.5)
    R = pitched(35.0)
    depth = plane_depth(K, R, 40, 48, (0, 0, 1), -0.7)
    depth[10:14, 20:30] = 0.0
    s = M.build_stack(None, depth, K, R, "D+G")
    assert not s.valid[10:14, 20:30].any()
    assert np.all(s.data[10:14, 20:30] == 0)
    assert s.valid[30:, :].all()


def test_stack_source_checks():
    with pytest.raises(UsageError):
        M.stack_channels(None, None, "RGB")
    with pytest.raises(UsageError):
        M.stack_channels(np.zeros((4, 4, 3)), None, "RGB+D")
