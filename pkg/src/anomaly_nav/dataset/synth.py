"""Procedural RGB-D terrain scenes standing in for robot sorties.

A pinhole camera at a random height and downward pitch looks over a textured
ground plane.  Anomalies are inserted by ray casting:

* ``wall``  - a tall thin box using the ground's texture (geometry only)
* ``box``   - a low step or rock, also ground-textured
* ``pit``   - a hole in the ground; its floor and inner walls are visible
* ``tall``  - a cluster of thin poles (vegetation-like clutter)
* ``blob``  - a bright saturated disc painted on flat ground (appearance only)
* ``fire``  - glowing orange discs with dark smoke (appearance only)

Conditions change illumination level, tint and specular puddle reflections.
Everything derives from ``(config, frame index)``, so scenes are exactly
reproducible.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from ..modalities import ALL, CameraIntrinsics, build_stack
from .container import (
    NEGATIVE,
    PATCH,
    POSITIVE,
    MIN_VALID_FRACTION,
    PatchDataset,
    PatchRecord,
    condition_code,
)

TEXTURES = {
    "asphalt": ((0.36, 0.36, 0.38), 0.30),
    "grass": ((0.27, 0.42, 0.20), 0.35),
    "dirt": ((0.46, 0.36, 0.26), 0.30),
}
ANOMALIES = ("wall", "box", "pit", "tall", "blob")
SKY = np.array([0.62, 0.72, 0.90])

CONDITION_PRESETS = {
    "sun": dict(illumination=1.0, specularity=0.0, tint=(1.0, 1.0, 1.0)),
    "fire": dict(illumination=1.0, specularity=0.0, tint=(1.0, 1.0, 1.0)),
    "wet": dict(illumination=0.85, specularity=0.45, tint=(0.95, 0.97, 1.0)),
    "rain": dict(illumination=0.6, specularity=0.7, tint=(0.9, 0.95, 1.05)),
    "twilight": dict(illumination=0.38, specularity=0.0, tint=(0.8, 0.88, 1.25)),
}


@dataclass(frozen=True)
class SyntheticSceneConfig:
    seed: int = 0
    texture: str = "mixed"
    illumination: float = 1.0
    specularity: float = 0.0
    tint: tuple[float, float, float] = (1.0, 1.0, 1.0)
    anomalies: tuple[str, ...] = ANOMALIES
    anomalies_per_frame: int = 4
    depth_noise: float = 0.002
    dropout: float = 0.01
    condition: str = "sun"
    width: int = 256
    height: int = 192
    ground_tilt_deg: float = 3.0
    camera_height: tuple[float, float] = (0.6, 0.8)
    pitch_deg: tuple[float, float] = (22.0, 34.0)
    positives_per_frame: int = 30
    negatives_per_frame: int = 30
    max_range: float = 10.0
    min_anomaly_fraction: float = 0.3

    @classmethod
    def for_condition(cls, condition: str, **overrides) -> "SyntheticSceneConfig":
        preset = dict(CONDITION_PRESETS[condition])
        if condition == "fire" and "anomalies" not in overrides:
            overrides["anomalies"] = ANOMALIES + ("fire",)
        preset.update(overrides)
        return cls(condition=condition, **preset)

    def replace(self, **kw) -> "SyntheticSceneConfig":
        return dataclasses.replace(self, **kw)


@dataclass
class Frame:
    frame_id: int
    condition: str
    rgb: np.ndarray  # H x W x 3 in [0, 1]
    depth: np.ndarray  # H x W metres, 0 where invalid
    valid: np.ndarray
    K: CameraIntrinsics
    R: np.ndarray
    labels: np.ndarray  # 0 ground, >0 anomaly id, -1 sky / out of range
    kinds: dict[int, str] = field(default_factory=dict)

    def stack(self, code: str = ALL, max_range: float = 10.0):
        return build_stack(self.rgb, self.depth, self.K, self.R, code, self.valid, max_range)


@dataclass
class Sortie:
    frames: list[Frame]
    positives: list[PatchRecord]
    negatives: list[PatchRecord]
    config: SyntheticSceneConfig

    def dataset(self, include_negatives: bool = True) -> PatchDataset:
        recs = self.positives + (self.negatives if include_negatives else [])
        return PatchDataset.from_records(recs, ALL, manifest=sortie_manifest(self))


def sortie_manifest(sortie: Sortie) -> dict[str, str]:
    cfg = sortie.config
    m = {
        "source": "synthetic",
        "condition": cfg.condition,
        "seed": str(cfg.seed),
        "frames": str(len(sortie.frames)),
        "max_range": repr(cfg.max_range),
        "norm.rgb": "scale=1",
        "norm.depth": f"divide={cfg.max_range!r};clamp=0,1",
        "norm.height": f"divide={cfg.max_range!r};clamp=-1,1",
        "norm.angle": "divide=pi/2",
    }
    for f in sortie.frames:
        m[f"frame.{f.frame_id}.condition"] = f.condition
        m[f"frame.{f.frame_id}.K"] = ",".join(repr(float(x)) for x in f.K.as_tuple())
        m[f"frame.{f.frame_id}.R"] = ",".join(repr(float(x)) for x in f.R.reshape(-1))
    return m


# --------------------------------------------------------------------------
# camera and geometry helpers


def camera_rotation(pitch_deg: float, roll_deg: float = 0.0) -> np.ndarray:
    """Camera-to-gravity rotation for a camera facing +x, pitched down."""
    t = math.radians(pitch_deg)
    fwd = np.array([math.cos(t), 0.0, -math.sin(t)])
    down = np.array([-math.sin(t), 0.0, -math.cos(t)])
    right = np.cross(down, fwd)
    R = np.column_stack([right, down, fwd])
    if roll_deg:
        r = math.radians(roll_deg)
        c, s = math.cos(r), math.sin(r)
        roll = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        R = R @ roll
    return R


def default_intrinsics(width: int, height: int) -> CameraIntrinsics:
    f = 0.55 * width
    return CameraIntrinsics(f, f, (width - 1) / 2.0, (height - 1) / 2.0)


def pixel_rays(K: CameraIntrinsics, R: np.ndarray, h: int, w: int) -> np.ndarray:
    """Gravity-frame rays scaled so their camera-z component is 1 (t == depth)."""
    v, u = np.mgrid[0:h, 0:w].astype(np.float64)
    cam = np.stack([(u - K.cx) / K.fx, (v - K.cy) / K.fy, np.ones_like(u)], axis=-1)
    return cam @ R.T


def _ray_box(rays: np.ndarray, lo: np.ndarray, hi: np.ndarray):
    """Slab test from the origin; returns (t_near, t_far, axis of entry)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / rays
        t0 = lo * inv
        t1 = hi * inv
    tmin = np.fmin(t0, t1)
    tmax = np.fmax(t0, t1)
    near_axis = np.argmax(tmin, axis=-1)
    t_near = np.max(tmin, axis=-1)
    t_far = np.min(tmax, axis=-1)
    far_axis = np.argmin(tmax, axis=-1)
    return t_near, t_far, near_axis, far_axis


class _Noise:
    """Hashed-lattice 3D value noise, several octaves, deterministic per seed."""

    def __init__(self, rng: np.random.Generator, size: int = 1 << 16):
        self.table = rng.random(size)
        self.mask = size - 1
        self.offset = rng.uniform(0, 1000, size=3)

    def _octave(self, p: np.ndarray) -> np.ndarray:
        q = p + self.offset
        i = np.floor(q).astype(np.int64)
        f = q - i
        f = f * f * (3 - 2 * f)
        out = 0.0
        for dx in (0, 1):
            for dy in (0, 1):
                for dz in (0, 1):
                    h = ((i[..., 0] + dx) * 73856093) ^ ((i[..., 1] + dy) * 19349663) ^ ((i[..., 2] + dz) * 83492791)
                    val = self.table[h & self.mask]
                    wx = f[..., 0] if dx else 1 - f[..., 0]
                    wy = f[..., 1] if dy else 1 - f[..., 1]
                    wz = f[..., 2] if dz else 1 - f[..., 2]
                    out = out + val * wx * wy * wz
        return out

    def __call__(self, p: np.ndarray, scales=(0.04, 0.15, 0.6)) -> np.ndarray:
        total, norm = 0.0, 0.0
        for i, s in enumerate(scales):
            a = 0.5**i
            total = total + a * self._octave(p / s)
            norm += a
        return total / norm - 0.5  # roughly in [-0.5, 0.5]


# --------------------------------------------------------------------------
# scene rendering


def _place(rng, rays, ground_t, h, w, near=1.0, far=7.0):
    """A ground point under a random pixel, ``near < depth < far``."""
    for _ in range(50):
        v = int(rng.uniform(0.3, 0.95) * h)
        u = int(rng.uniform(0.12, 0.88) * w)
        t = ground_t[v, u]
        if np.isfinite(t) and near < t < far:
            return rays[v, u] * t
    return None


def render_frame(cfg: SyntheticSceneConfig, index: int) -> Frame:
    rng = np.random.default_rng([cfg.seed, index, 7919])
    h, w = cfg.height, cfg.width
    K = default_intrinsics(w, h)
    R = camera_rotation(rng.uniform(*cfg.pitch_deg), rng.uniform(-2.0, 2.0))
    cam_h = rng.uniform(*cfg.camera_height)
    rays = pixel_rays(K, R, h, w)

    tilt = math.radians(rng.uniform(0, cfg.ground_tilt_deg))
    az = rng.uniform(0, 2 * math.pi)
    g_n = np.array([math.sin(tilt) * math.cos(az), math.sin(tilt) * math.sin(az), math.cos(tilt)])
    with np.errstate(divide="ignore", invalid="ignore"):
        ground_t = -cam_h / (rays @ g_n)
    ground_t = np.where(ground_t > 0, ground_t, np.inf)

    t_hit = ground_t.copy()
    normal = np.broadcast_to(g_n, rays.shape).copy()
    labels = np.where(np.isfinite(ground_t), 0, -1).astype(np.int16)
    kinds: dict[int, str] = {}
    paint: list[tuple[int, np.ndarray, float, str]] = []

    family = cfg.texture if cfg.texture != "mixed" else rng.choice(sorted(TEXTURES))
    base, amp = TEXTURES[str(family)]
    noise = _Noise(rng)

    def hit_box(lo, hi, ident, kind):
        nonlocal t_hit, normal
        tn, tf, ax, _ = _ray_box(rays, lo, hi)
        hit = (tn <= tf) & (tn > 0) & (tn < t_hit)
        if not hit.any():
            return
        t_hit = np.where(hit, tn, t_hit)
        face = np.zeros_like(rays)
        idx = np.argwhere(hit)
        a = ax[hit]
        face[idx[:, 0], idx[:, 1], a] = -np.sign(rays[hit, a])
        normal = np.where(hit[..., None], face, normal)
        labels[hit] = ident
        kinds[ident] = kind

    n_anom = cfg.anomalies_per_frame if cfg.anomalies else 0
    for ident in range(1, n_anom + 1):
        kind = str(rng.choice(cfg.anomalies))
        spot = _place(rng, rays, ground_t, h, w, near=3.0 if kind == "wall" else 1.2)
        if spot is None:
            continue
        gz = spot[2]
        if kind == "wall":
            width, thick, height = rng.uniform(0.8, 1.8), rng.uniform(0.1, 0.3), rng.uniform(0.5, 1.2)
            lo = spot + np.array([0.0, -width / 2, 0.0])
            hit_box(np.array([lo[0], lo[1], gz - 0.2]), np.array([lo[0] + thick, lo[1] + width, gz + height]), ident, kind)
        elif kind == "box":
            sx, sy, sz = rng.uniform(0.3, 0.8), rng.uniform(0.4, 1.0), rng.uniform(0.2, 0.45)
            hit_box(spot + np.array([0, -sy / 2, -0.2]), spot + np.array([sx, sy / 2, sz]), ident, kind)
        elif kind == "tall":
            for _ in range(25):
                off = np.array([rng.uniform(0, 0.6), rng.uniform(-0.4, 0.4), -0.2])
                thick = rng.uniform(0.02, 0.05)
                top = rng.uniform(0.2, 0.6)
                lo = spot + off
                hit_box(lo, lo + np.array([thick, thick, top + 0.2]), ident, kind)
        elif kind == "pit":
            sx, sy, depth = rng.uniform(0.7, 1.4), rng.uniform(0.8, 1.6), rng.uniform(0.3, 0.8)
            lo = spot + np.array([0.0, -sy / 2, -depth])
            hi = spot + np.array([sx, sy / 2, 0.5])
            pg = rays * np.where(np.isfinite(ground_t), ground_t, 0.0)[..., None]
            inside = (
                np.isfinite(ground_t)
                & (t_hit == ground_t)
                & (pg[..., 0] > lo[0])
                & (pg[..., 0] < hi[0])
                & (pg[..., 1] > lo[1])
                & (pg[..., 1] < hi[1])
            )
            if inside.any():
                _, tf, _, fax = _ray_box(rays, lo, hi)
                t_hit = np.where(inside, tf, t_hit)
                face = np.zeros_like(rays)
                idx = np.argwhere(inside)
                a = fax[inside]
                face[idx[:, 0], idx[:, 1], a] = -np.sign(rays[inside, a])
                normal = np.where(inside[..., None], face, normal)
                labels[inside] = ident
                kinds[ident] = kind
        else:  # painted anomalies: blob / fire
            radius = rng.uniform(0.35, 0.7)
            paint.append((ident, spot, radius, kind))

    finite = np.isfinite(t_hit)
    pts = rays * np.where(finite, t_hit, 0.0)[..., None]
    # texture and shading
    lum = noise(pts)
    chroma = noise(pts * 1.7 + 13.0, scales=(0.3,))
    color = np.asarray(base)[None, None, :] * (1.0 + amp * 1.6 * lum[..., None])
    color = color + 0.06 * chroma[..., None] * np.array([1.0, -0.5, -0.5])
    sun_dir = np.array([math.cos(az) * 0.5, math.sin(az) * 0.5, math.sqrt(0.75)])
    shade = 0.72 + 0.28 * np.clip(normal @ sun_dir, 0.0, 1.0)
    color = color * shade[..., None]

    for ident, spot, radius, kind in paint:
        r = np.hypot(pts[..., 0] - spot[0], pts[..., 1] - spot[1] * 1.0)
        on = finite & (labels == 0) & (r < radius * (1.0 + 0.25 * noise(pts * 0.5 + ident)))
        if not on.any():
            continue
        if kind == "fire":
            glow = np.array([1.0, 0.55 + 0.3 * rng.random(), 0.1])
            smoke = noise(pts * 2.0 + 5.0) > 0.05
            col = np.where(smoke[..., None], np.array([0.08, 0.08, 0.09]), glow)
        else:
            hue = rng.choice([[0.95, 0.15, 0.1], [0.95, 0.9, 0.1], [0.15, 0.3, 0.95], [0.97, 0.97, 0.97]])
            col = np.broadcast_to(np.asarray(hue), color.shape)
        color = np.where(on[..., None], col, color)
        labels[on] = ident
        kinds[ident] = kind

    if cfg.specularity > 0:
        puddle = (noise(pts * 0.35 + 3.0, scales=(0.5,)) + 0.5) > (1.0 - 0.45 * cfg.specularity)
        sheen = np.clip(noise(pts * 3.0 + 9.0, scales=(0.08,)) + 0.5, 0, 1) ** 3
        refl = (labels >= 0) & finite & puddle
        mix = cfg.specularity * (0.5 + 0.5 * sheen)
        color = np.where(
            refl[..., None], color * (1 - mix[..., None]) + SKY * mix[..., None] * 1.15, color * (1 - 0.25 * cfg.specularity)
        )

    color = np.where(finite[..., None], color, SKY)
    color = color * cfg.illumination * np.asarray(cfg.tint)
    color = color + rng.normal(0, 0.015, size=color.shape)
    rgb = np.clip(color, 0.0, 1.0).astype(np.float32)

    depth = np.where(finite, t_hit, 0.0)
    depth = depth * (1.0 + cfg.depth_noise * rng.standard_normal(depth.shape))
    valid = finite & (depth > 0.05) & (depth < cfg.max_range)
    if cfg.dropout > 0:
        valid &= rng.random(depth.shape) >= cfg.dropout
    out_of_range = ~(finite & (t_hit < cfg.max_range))
    labels[out_of_range] = -1
    depth = np.where(valid, depth, 0.0).astype(np.float32)
    return Frame(index, cfg.condition, rgb, depth, valid, K, R, labels.astype(np.int16), kinds)


# --------------------------------------------------------------------------
# patch sampling


def _window_sums(mask: np.ndarray) -> np.ndarray:
    """Sum of ``mask`` over the 32x32 window centred at every pixel (v, u);
    windows leaving the frame get -1."""
    h, w = mask.shape
    ii = np.zeros((h + 1, w + 1))
    ii[1:, 1:] = np.cumsum(np.cumsum(mask.astype(np.float64), 0), 1)
    r = PATCH // 2
    out = np.full((h, w), -1.0)
    v0 = np.arange(r, h - r + 1)
    u0 = np.arange(r, w - r + 1)
    if len(v0) == 0 or len(u0) == 0:
        return out
    a, b = v0 - r, v0 + r
    c, d = u0 - r, u0 + r
    out[r : h - r + 1, r : w - r + 1] = ii[b][:, d] - ii[a][:, d] - ii[b][:, c] + ii[a][:, c]
    return out


def sample_centers(frame: Frame, stack_valid: np.ndarray, cfg: SyntheticSceneConfig, rng):
    """Positive centres: windows entirely on ground.  Negative centres: centre
    pixel on an anomaly and a sizeable share of the window anomalous."""
    area = PATCH * PATCH
    valid_ok = _window_sums(stack_valid) >= MIN_VALID_FRACTION * area
    ground = _window_sums(frame.labels == 0) >= area
    anom = _window_sums(frame.labels > 0) >= cfg.min_anomaly_fraction * area
    pos = np.argwhere(valid_ok & ground)
    neg = np.argwhere(valid_ok & anom & (frame.labels > 0))

    def pick(cands, n):
        if n <= 0 or len(cands) == 0:
            return np.zeros((0, 2), dtype=np.int64)
        idx = rng.choice(len(cands), size=min(n, len(cands)), replace=False)
        return cands[np.sort(idx)][:, ::-1]  # (v, u) -> (u, v)

    return pick(pos, cfg.positives_per_frame), pick(neg, cfg.negatives_per_frame)


def synth_generate(config: SyntheticSceneConfig, n_frames: int, frame_offset: int = 0) -> Sortie:
    """Render ``n_frames`` frames and cut labelled patches from them."""
    from .container import extract_patches

    cond = condition_code(config.condition)
    frames, pos, neg = [], [], []
    for i in range(frame_offset, frame_offset + n_frames):
        fr = render_frame(config, i)
        st = fr.stack(ALL, config.max_range)
        rng = np.random.default_rng([config.seed, i, 104729])
        pc, nc = sample_centers(fr, st.valid, config, rng)
        pos += extract_patches(st, pc, POSITIVE, cond, i)
        neg += extract_patches(st, nc, NEGATIVE, cond, i)
        frames.append(fr)
    return Sortie(frames, pos, neg, config)
