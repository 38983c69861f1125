"""Geometric input channels derived from depth and the camera's orientation.

Frames: the camera optical frame is x-right, y-down, z-forward; the gravity
frame is z-up, with its origin at the camera centre.  Points are computed in
float64 and stored as float32 channels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, UsageError, ValidationError

ORDER = ("RGB", "D", "G", "N", "A")
CHANNELS = {"RGB": 3, "D": 1, "G": 2, "N": 2, "A": 1}
ALL = "+".join(ORDER)
DEFAULT_MAX_RANGE = 10.0
NORMAL_WINDOW = 5


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValidationError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.fx, self.fy, self.cx, self.cy)


def validate_rotation(R, tol: float = 1e-5) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3):
        raise ValidationError(f"orientation must be 3x3, got {R.shape}")
    if not np.allclose(R.T @ R, np.eye(3), atol=tol) or abs(np.linalg.det(R) - 1.0) > tol:
        raise ValidationError("orientation is not a proper rotation (R^T R != I or det != 1)")
    return R


def parse_code(code: str) -> tuple[str, ...]:
    """``"N+RGB+G"`` -> ``("RGB", "G", "N")`` (canonical order)."""
    tokens = [t.strip().upper() for t in str(code).split("+") if t.strip()]
    unknown = [t for t in tokens if t not in CHANNELS]
    if unknown or not tokens:
        raise UsageError(f"unknown modality token(s) {unknown or [code]}; valid: {', '.join(ORDER)}")
    if len(set(tokens)) != len(tokens):
        raise UsageError(f"repeated modality token in {code!r}")
    return tuple(t for t in ORDER if t in tokens)


def canonical(code: str) -> str:
    return "+".join(parse_code(code))


def channel_count(code: str) -> int:
    return sum(CHANNELS[t] for t in parse_code(code))


def channel_slices(code: str) -> dict[str, slice]:
    out, at = {}, 0
    for t in parse_code(code):
        out[t] = slice(at, at + CHANNELS[t])
        at += CHANNELS[t]
    return out


def channel_index(source_code: str, target_code: str) -> np.ndarray:
    """Indices picking ``target_code``'s channels out of a ``source_code`` stack."""
    src = channel_slices(source_code)
    idx = []
    for t in parse_code(target_code):
        if t not in src:
            raise UsageError(f"modality {t} is not present in stack {canonical(source_code)}")
        idx.extend(range(src[t].start, src[t].stop))
    return np.array(idx, dtype=np.int64)


# --------------------------------------------------------------------------
# geometry


def backproject(depth, K: CameraIntrinsics, R, valid=None) -> tuple[np.ndarray, np.ndarray]:
    """``p = R K^-1 [u, v, 1]^T d`` for every pixel; returns ``(H x W x 3, valid)``."""
    depth = np.asarray(depth, dtype=np.float64)
    R = validate_rotation(R)
    if depth.ndim != 2:
        raise DimensionError(f"depth must be H x W, got {depth.shape}")
    ok = np.isfinite(depth) & (depth > 0)
    if valid is not None:
        ok &= np.asarray(valid, dtype=bool)
    h, w = depth.shape
    v, u = np.mgrid[0:h, 0:w].astype(np.float64)
    d = np.where(ok, depth, 0.0)
    cam = np.stack([(u - K.cx) / K.fx * d, (v - K.cy) / K.fy * d, d], axis=-1)
    return cam @ R.T, ok


def reproject(points, K: CameraIntrinsics, R) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Inverse of ``backproject``: gravity-frame points to ``(u, v, depth)``."""
    R = validate_rotation(R)
    cam = np.asarray(points, dtype=np.float64) @ R
    d = cam[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = K.fx * cam[..., 0] / d + K.cx
        v = K.fy * cam[..., 1] / d + K.cy
    return u, v, d


def gravity_align_depth(points) -> np.ndarray:
    """``(d_horz, d_vert) = (sqrt(px^2 + py^2), pz)``."""
    p = np.asarray(points, dtype=np.float64)
    return np.stack([np.hypot(p[..., 0], p[..., 1]), p[..., 2]], axis=-1)


def _box_sum(a: np.ndarray, k: int) -> np.ndarray:
    """Sum over the k x k neighbourhood (zero outside the image)."""
    r = k // 2
    pad = [(r, r), (r, r)] + [(0, 0)] * (a.ndim - 2)
    ap = np.pad(a, pad)
    h, w = a.shape[:2]
    out = np.zeros_like(a)
    for dy in range(k):
        for dx in range(k):
            out += ap[dy : dy + h, dx : dx + w]
    return out


def surface_normals(points, valid, window: int = NORMAL_WINDOW) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares plane normal over each ``window x window`` neighbourhood.

    The normal is the eigenvector of the smallest eigenvalue of the local point
    covariance, oriented toward the camera.  A pixel is invalid unless it is
    itself valid, at least half of its neighbourhood is valid, and the
    neighbourhood spans a plane (rank >= 2).
    """
    p = np.asarray(points, dtype=np.float64)
    ok = np.asarray(valid, dtype=bool)
    wgt = ok.astype(np.float64)
    n = _box_sum(wgt, window)
    pw = np.where(ok[..., None], p, 0.0)
    s1 = _box_sum(pw, window)
    s2 = _box_sum(pw[..., :, None] * pw[..., None, :], window)
    safe_n = np.maximum(n, 1.0)[..., None]
    mean = s1 / safe_n
    cov = s2 / safe_n[..., None] - mean[..., :, None] * mean[..., None, :]
    evals, evecs = np.linalg.eigh(cov)
    normals = evecs[..., :, 0]
    scale = np.maximum(evals[..., 2], 1e-300)
    planar = evals[..., 1] > 1e-10 * scale
    good = ok & (n >= (window * window + 1) // 2) & planar & (evals[..., 2] > 0)
    # toward the camera (origin): n . (0 - p) >= 0
    flip = np.sum(normals * p, axis=-1) > 0
    normals = np.where(flip[..., None], -normals, normals)
    normals = np.where(good[..., None], normals, 0.0)
    return normals, good


def gravity_align_normals(normals) -> np.ndarray:
    """``(n_horz, n_vert)`` after flipping every normal to point up."""
    n = np.asarray(normals, dtype=np.float64)
    up = np.where(n[..., 2:3] < 0, -n, n)
    return np.stack([np.hypot(up[..., 0], up[..., 1]), up[..., 2]], axis=-1)


def normal_angle(n_channels) -> tuple[np.ndarray, np.ndarray]:
    """Inclination of the normal above the horizontal plane, ``atan2(n_vert, n_horz)``.

    Returns ``(angle, valid)``; the zero vector is invalid.
    """
    nc = np.asarray(n_channels, dtype=np.float64)
    h, v = nc[..., 0], nc[..., 1]
    ok = (h != 0) | (v != 0)
    return np.where(ok, np.arctan2(v, h), 0.0), ok


# --------------------------------------------------------------------------
# channel stacks


@dataclass
class ChannelStack:
    data: np.ndarray  # H x W x c float32
    code: str
    valid: np.ndarray  # H x W bool

    def __post_init__(self):
        self.code = canonical(self.code)
        if self.data.ndim != 3 or self.data.shape[-1] != channel_count(self.code):
            raise DimensionError(
                f"stack {self.data.shape} does not hold the {channel_count(self.code)} channels of {self.code}"
            )

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape[:2]

    def select(self, code: str) -> "ChannelStack":
        idx = channel_index(self.code, code)
        return ChannelStack(self.data[..., idx], code, self.valid.copy())


@dataclass
class Geometry:
    """Raw (unnormalised) derived channels plus per-pixel validity."""

    depth: np.ndarray
    depth_valid: np.ndarray
    points: np.ndarray
    g: np.ndarray
    n: np.ndarray
    a: np.ndarray
    normal_valid: np.ndarray


def derive_geometry(depth, K: CameraIntrinsics, R, valid=None, window: int = NORMAL_WINDOW) -> Geometry:
    points, ok = backproject(depth, K, R, valid)
    normals, nok = surface_normals(points, ok, window)
    nch = gravity_align_normals(normals)
    ang, aok = normal_angle(nch)
    nok &= aok
    return Geometry(
        depth=np.where(ok, np.asarray(depth, np.float64), 0.0),
        depth_valid=ok,
        points=points,
        g=gravity_align_depth(points),
        n=nch,
        a=ang,
        normal_valid=nok,
    )


def stack_channels(rgb, geometry: Geometry | None, code: str, max_range: float = DEFAULT_MAX_RANGE) -> ChannelStack:
    """Concatenate normalised channels in canonical order.

    RGB is scaled to [0, 1]; depth and horizontal distance are divided by
    ``max_range`` and clamped to [0, 1]; the height channel likewise but
    clamped to [-1, 1] since points below the camera are negative; normal
    components are stored raw; the angle is divided by pi/2.  Depth-derived
    channels are zeroed where invalid and the mask records validity of every
    included depth-derived modality.
    """
    tokens = parse_code(code)
    parts = []
    h = w = None
    valid = None
    if rgb is not None:
        rgb = np.asarray(rgb)
        h, w = rgb.shape[:2]
    if geometry is not None:
        gh, gw = geometry.depth.shape
        if h is not None and (gh, gw) != (h, w):
            raise DimensionError(f"rgb {h}x{w} and depth {gh}x{gw} differ in size")
        h, w = gh, gw
    if h is None:
        raise UsageError("stack_channels needs at least one source image")
    valid = np.ones((h, w), dtype=bool)
    for t in tokens:
        if t == "RGB":
            if rgb is None:
                raise UsageError("code requests RGB but no colour image was given")
            img = rgb.astype(np.float64)
            if np.issubdtype(rgb.dtype, np.integer):
                img = img / 255.0
            parts.append(np.clip(img, 0.0, 1.0))
            continue
        if geometry is None:
            raise UsageError(f"code requests {t} but no depth geometry was given")
        g = geometry
        if t == "D":
            ch, ok = np.clip(g.depth / max_range, 0.0, 1.0)[..., None], g.depth_valid
        elif t == "G":
            ch = np.stack(
                [np.clip(g.g[..., 0] / max_range, 0.0, 1.0), np.clip(g.g[..., 1] / max_range, -1.0, 1.0)],
                axis=-1,
            )
            ok = g.depth_valid
        elif t == "N":
            ch, ok = g.n, g.normal_valid
        else:
            ch, ok = (g.a / (np.pi / 2))[..., None], g.normal_valid
        parts.append(np.where(ok[..., None], ch, 0.0))
        valid &= ok
    data = np.concatenate(parts, axis=-1).astype(np.float32)
    return ChannelStack(data, code, valid)


def build_stack(rgb, depth, K, R, code: str = ALL, valid=None, max_range: float = DEFAULT_MAX_RANGE) -> ChannelStack:
    needs_depth = any(t != "RGB" for t in parse_code(code))
    geo = derive_geometry(depth, K, R, valid) if needs_depth else None
    return stack_channels(rgb, geo, code, max_range)
