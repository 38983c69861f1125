"""Full-frame anomaly masks, their 3D projection and a 2D grid map.

Cell ``(a, b)`` of a score map covers input rows ``[4a, 4a + 32)`` and
columns ``[4b, 4b + 32)``; its window centre is pixel ``(4a + 15, 4b + 15)``.
"""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DimensionError, FormatError, UsageError
from .grad.checkpoint import decode_meta, encode_meta
from .modalities import CameraIntrinsics, ChannelStack, backproject, parse_code
from .models import PATCH, STRIDE, feature_shape

CENTER_OFFSET = PATCH // 2 - 1  # 15
AGGREGATIONS = ("max", "mean")


@dataclass
class AnomalyMask:
    scores: np.ndarray  # j x k
    threshold: float
    frame_id: str = ""
    checkpoint_id: str = ""

    @property
    def binary(self) -> np.ndarray:
        return self.scores > self.threshold

    @property
    def shape(self) -> tuple[int, int]:
        return self.scores.shape


def _frame_for(frame: ChannelStack, modality: str) -> np.ndarray:
    want = parse_code(modality)
    have = parse_code(frame.code)
    if want == have:
        return frame.data
    if set(want) <= set(have):
        return frame.select(modality).data
    raise UsageError(f"frame holds {frame.code} but the checkpoint was trained on {modality}")


def infer_mask(frame: ChannelStack, detector, threshold: float = np.inf, frame_id="", checkpoint_id="") -> AnomalyMask:
    """Score every 32x32 window of ``frame`` at stride 4 in one dense pass."""
    h, w = frame.shape
    if h < PATCH or w < PATCH:
        raise DimensionError(f"frame is {h}x{w}; dense inference needs at least {PATCH}x{PATCH}")
    data = _frame_for(frame, detector.modality)
    scores = detector.score_map(data)
    expect = feature_shape(h, w)[:2]
    if scores.shape != expect:
        raise DimensionError(f"score map {scores.shape} but the encoder shape formula gives {expect}")
    return AnomalyMask(scores.astype(np.float64), float(threshold), str(frame_id), str(checkpoint_id))


def cell_index(n_pixels: int, n_cells: int) -> np.ndarray:
    """Nearest cell (by window centre) for each of ``n_pixels`` rows (or columns)."""
    p = np.arange(n_pixels)
    return np.clip(np.floor((p - CENTER_OFFSET) / STRIDE + 0.5).astype(np.int64), 0, n_cells - 1)


def cell_centers(n_cells: int) -> np.ndarray:
    return STRIDE * np.arange(n_cells) + CENTER_OFFSET


def upsample_mask(scores: np.ndarray, height: int, width: int) -> np.ndarray:
    """Per-pixel score image: every pixel takes the cell whose centre is nearest."""
    scores = np.asarray(scores)
    if scores.ndim != 2:
        raise DimensionError(f"score map must be j x k, got {scores.shape}")
    rows = cell_index(height, scores.shape[0])
    cols = cell_index(width, scores.shape[1])
    return scores[rows][:, cols]


@dataclass
class PointScoreCloud:
    points: np.ndarray  # M x 3 gravity frame
    scores: np.ndarray  # M

    def __len__(self) -> int:
        return len(self.scores)

    def to_xyz(self) -> str:
        buf = io.StringIO()
        for (x, y, z), s in zip(self.points, self.scores):
            buf.write(f"{x:.6f} {y:.6f} {z:.6f} {s:.6g}\n")
        return buf.getvalue()


def project_points(score_image, depth, K: CameraIntrinsics, R, valid=None) -> PointScoreCloud:
    score_image = np.asarray(score_image, dtype=np.float64)
    if score_image.shape != np.shape(depth):
        raise DimensionError(f"score image {score_image.shape} vs depth {np.shape(depth)}")
    pts, ok = backproject(depth, K, R, valid)
    ok &= np.isfinite(score_image)
    return PointScoreCloud(pts[ok], score_image[ok])


@dataclass
class GridMap2D:
    origin: tuple[float, float]
    cell_size: float
    score: np.ndarray  # rows = y cells, cols = x cells; NaN where unknown
    count: np.ndarray
    aggregation: str = "max"
    meta: dict[str, str] = field(default_factory=dict)

    @property
    def known(self) -> np.ndarray:
        return self.count > 0

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["x_index", "y_index", "score", "count"])
        ny, nx = self.score.shape
        for iy in range(ny):
            for ix in range(nx):
                c = int(self.count[iy, ix])
                w.writerow([ix, iy, repr(float(self.score[iy, ix])) if c else "nan", c])
        return buf.getvalue()

    def cell_of(self, x: float, y: float) -> tuple[int, int]:
        return (
            int(np.floor((x - self.origin[0]) / self.cell_size)),
            int(np.floor((y - self.origin[1]) / self.cell_size)),
        )


def rasterize(
    cloud: PointScoreCloud,
    cell_size: float,
    aggregation: str = "max",
    origin: tuple[float, float] | None = None,
    shape: tuple[int, int] | None = None,
) -> GridMap2D:
    """Aggregate point scores into ``cell_size`` square cells over (x, y).

    Without ``origin``/``shape`` the grid spans the cloud's bounding box.
    Points falling outside an explicit grid are dropped.
    """
    if not cell_size > 0:
        raise UsageError("cell size must be positive")
    if aggregation not in AGGREGATIONS:
        raise UsageError(f"aggregation must be one of {AGGREGATIONS}")
    pts = np.asarray(cloud.points, dtype=np.float64).reshape(-1, 3)
    sc = np.asarray(cloud.scores, dtype=np.float64).reshape(-1)
    if origin is None:
        origin = (
            (float(np.floor(pts[:, 0].min() / cell_size) * cell_size), float(np.floor(pts[:, 1].min() / cell_size) * cell_size))
            if len(pts)
            else (0.0, 0.0)
        )
    ix = np.floor((pts[:, 0] - origin[0]) / cell_size).astype(np.int64)
    iy = np.floor((pts[:, 1] - origin[1]) / cell_size).astype(np.int64)
    if shape is None:
        shape = (int(iy.max()) + 1, int(ix.max()) + 1) if len(pts) else (1, 1)
    ny, nx = shape
    inside = (ix >= 0) & (ix < nx) & (iy >= 0) & (iy < ny)
    ix, iy, sc = ix[inside], iy[inside], sc[inside]
    flat = iy * nx + ix
    count = np.bincount(flat, minlength=ny * nx).reshape(ny, nx)
    if aggregation == "max":
        agg = np.full(ny * nx, -np.inf)
        np.maximum.at(agg, flat, sc)
        agg = agg.reshape(ny, nx)
    else:
        agg = np.bincount(flat, weights=sc, minlength=ny * nx).reshape(ny, nx)
        with np.errstate(invalid="ignore", divide="ignore"):
            agg = agg / count
    agg = np.where(count > 0, agg, np.nan)
    return GridMap2D((float(origin[0]), float(origin[1])), float(cell_size), agg, count, aggregation)


def calibrate_threshold(safe_scores, target_fpr: float = 0.05) -> float:
    """Smallest observed score ``t`` flagging at most ``target_fpr`` of the safe
    validation scores as anomalous (``score > t``)."""
    if not 0.0 <= target_fpr <= 1.0:
        raise UsageError(f"target FPR must lie in [0, 1], got {target_fpr}")
    s = np.sort(np.asarray(safe_scores, dtype=np.float64).reshape(-1))
    if len(s) == 0:
        raise UsageError("calibration needs at least one safe score")
    above = (len(s) - np.searchsorted(s, s, side="right")) / len(s)
    ok = np.flatnonzero(above <= target_fpr + 1e-12)
    return float(s[ok[0]])


# --------------------------------------------------------------------------
# exports


def _atomic_write(path: Path, data: bytes) -> Path:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)
    return path


def sidecar_path(pgm_path) -> Path:
    return Path(pgm_path).with_suffix(".meta")


def write_mask_pgm(mask: AnomalyMask, path) -> Path:
    """8-bit binary PGM of the min-max normalised scores plus a key=value sidecar."""
    path = Path(path)
    s = mask.scores
    lo, hi = float(np.min(s)), float(np.max(s))
    span = hi - lo
    img = np.zeros_like(s) if span == 0 else (s - lo) / span
    pix = np.round(img * 255).astype(np.uint8)
    h, w = pix.shape
    _atomic_write(path, f"P5\n{w} {h}\n255\n".encode() + pix.tobytes())
    meta = {
        "min": repr(lo),
        "max": repr(hi),
        "threshold": repr(mask.threshold),
        "rows": str(h),
        "cols": str(w),
        "frame": mask.frame_id,
        "checkpoint": mask.checkpoint_id,
        "encoding": "pixel = round(255 * (score - min) / (max - min))",
        "anomalous_cells": str(int(mask.binary.sum())),
    }
    _atomic_write(sidecar_path(path), encode_meta(meta))
    return path


def read_mask_pgm(path) -> AnomalyMask:
    """Inverse of ``write_mask_pgm`` up to the 8-bit quantisation."""
    path = Path(path)
    raw = path.read_bytes()
    parts = raw.split(maxsplit=4)
    if len(parts) < 5 or parts[0] != b"P5":
        raise FormatError(f"{path} is not a binary PGM")
    try:
        w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    except ValueError:
        raise FormatError(f"{path}: malformed PGM header") from None
    body = parts[4]
    if maxval != 255 or len(body) != w * h:
        raise FormatError(f"{path}: expected {w * h} 8-bit pixels, found {len(body)} bytes")
    pix = np.frombuffer(body, dtype=np.uint8).reshape(h, w).astype(np.float64)
    side = sidecar_path(path)
    if not side.exists():
        raise FormatError(f"{path}: sidecar {side.name} is missing")
    meta = decode_meta(side.read_bytes())
    try:
        lo, hi = float(meta["min"]), float(meta["max"])
        thr = float(meta["threshold"])
    except (KeyError, ValueError) as e:
        raise FormatError(f"{side}: bad sidecar ({e})") from None
    scores = lo + pix / 255.0 * (hi - lo)
    return AnomalyMask(scores, thr, meta.get("frame", ""), meta.get("checkpoint", ""))


def write_grid_csv(grid: GridMap2D, path) -> Path:
    return _atomic_write(Path(path), grid.to_csv().encode())


def write_xyz(cloud: PointScoreCloud, path) -> Path:
    return _atomic_write(Path(path), cloud.to_xyz().encode())


__all__ = [
    "AGGREGATIONS",
    "CENTER_OFFSET",
    "AnomalyMask",
    "GridMap2D",
    "PointScoreCloud",
    "calibrate_threshold",
    "cell_centers",
    "cell_index",
    "infer_mask",
    "project_points",
    "rasterize",
    "read_mask_pgm",
    "upsample_mask",
    "write_grid_csv",
    "write_mask_pgm",
    "write_xyz",
]
