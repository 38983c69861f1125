"""Single RGB-D frames on disk (``.npz``) with their camera model.

Keys: ``rgb`` (H x W x 3, uint8 or float in [0, 1]), ``depth`` (H x W metres),
``K`` (fx, fy, cx, cy), ``R`` (3 x 3 camera-to-gravity rotation) and optional
``valid``, ``labels``, ``frame_id``, ``condition``.
"""

from __future__ import annotations

import os
import zipfile
from pathlib import Path

import numpy as np

from ..errors import FormatError, UsageError
from ..modalities import CameraIntrinsics, validate_rotation
from .synth import Frame


def save_frame(frame: Frame, path) -> Path:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp.npz")
    arrays = dict(
        rgb=frame.rgb,
        depth=frame.depth,
        valid=frame.valid,
        K=np.asarray(frame.K.as_tuple(), dtype=np.float64),
        R=np.asarray(frame.R, dtype=np.float64),
        labels=frame.labels,
        frame_id=np.int64(frame.frame_id),
        condition=np.str_(frame.condition),
    )
    np.savez(tmp, **arrays)
    os.replace(tmp, path)
    return path


def load_frame(path) -> Frame:
    path = Path(path)
    try:
        z = np.load(path, allow_pickle=False)
    except (OSError, ValueError, zipfile.BadZipFile) as e:
        raise FormatError(f"{path}: not a frame archive ({e})") from None
    with z:
        keys = set(z.files)
        for req in ("rgb", "depth"):
            if req not in keys:
                raise FormatError(f"{path}: frame lacks {req!r}")
        if "K" not in keys:
            raise UsageError(f"{path}: frame has no camera intrinsics 'K'")
        if "R" not in keys:
            raise UsageError(f"{path}: frame has no orientation 'R'")
        K = np.asarray(z["K"], dtype=np.float64).reshape(-1)
        if K.size == 9:
            m = K.reshape(3, 3)
            K = np.array([m[0, 0], m[1, 1], m[0, 2], m[1, 2]])
        if K.size != 4:
            raise FormatError(f"{path}: intrinsics must be (fx, fy, cx, cy) or a 3x3 matrix")
        rgb = z["rgb"]
        if np.issubdtype(rgb.dtype, np.integer):
            rgb = rgb.astype(np.float32) / 255.0
        depth = z["depth"].astype(np.float32)
        valid = z["valid"].astype(bool) if "valid" in keys else (np.isfinite(depth) & (depth > 0))
        labels = z["labels"] if "labels" in keys else np.zeros(depth.shape, np.int16)
        fid = int(z["frame_id"]) if "frame_id" in keys else 0
        cond = str(z["condition"]) if "condition" in keys else "synthetic"
        R = validate_rotation(z["R"])
    if rgb.shape[:2] != depth.shape:
        raise FormatError(f"{path}: rgb {rgb.shape[:2]} and depth {depth.shape} differ")
    return Frame(fid, cond, rgb.astype(np.float32), depth, valid, CameraIntrinsics(*map(float, K)), R, labels)
