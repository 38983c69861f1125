from __future__ import annotations

import numpy as np

from .. import grad as G
from ..errors import DimensionError
from .encoder import PATCH, STRIDE, decode, encode, feature_extent


def reconstruct(x, encoder, decoder) -> G.Tensor:
    return decode(encode(x, encoder), decoder)


def ae_loss(x, encoder, decoder) -> G.Tensor:
    """Mean squared reconstruction error over every entry of the batch."""
    x = G.as_tensor(x)
    r = reconstruct(x, encoder, decoder)
    if r.shape != x.shape:
        raise DimensionError(f"reconstruction {r.shape} does not match input {x.shape}")
    return G.mean(G.square(G.sub(r, x)))


def ae_score(x: np.ndarray, encoder, decoder, chunk: int = 256) -> np.ndarray:
    """Per-patch mean squared reconstruction error (higher = more anomalous)."""
    x = np.asarray(x, dtype=np.float32)
    single = x.ndim == 3
    if single:
        x = x[None]
    out = np.empty(len(x), dtype=np.float32)
    with G.no_grad():
        for s in range(0, len(x), chunk):
            xb = x[s : s + chunk]
            r = reconstruct(xb, encoder, decoder).data
            if r.shape != xb.shape:
                raise DimensionError(f"reconstruction {r.shape} does not match input {xb.shape}")
            out[s : s + chunk] = np.mean((r - xb) ** 2, axis=(1, 2, 3))
    return out[0] if single else out


def window_means(err: np.ndarray, j: int, k: int) -> np.ndarray:
    """Mean of ``err`` over each 32x32 window at stride 4, via an integral image."""
    ii = np.zeros((err.shape[0] + 1, err.shape[1] + 1), dtype=np.float64)
    ii[1:, 1:] = np.cumsum(np.cumsum(err, axis=0, dtype=np.float64), axis=1)
    r0 = np.arange(j) * STRIDE
    c0 = np.arange(k) * STRIDE
    r1, c1 = r0 + PATCH, c0 + PATCH
    s = ii[r1][:, c1] - ii[r0][:, c1] - ii[r1][:, c0] + ii[r0][:, c0]
    return (s / (PATCH * PATCH)).astype(np.float32)


def ae_score_map(frame: np.ndarray, encoder, decoder) -> np.ndarray:
    """Dense reconstruction error: one fully-convolutional decode of the whole
    frame, squared error averaged over channels, then over each cell's
    receptive field.  Exact for a 32x32 frame; on larger frames overlapping
    windows share one reconstruction."""
    frame = np.asarray(frame, dtype=np.float32)
    with G.no_grad():
        r = reconstruct(frame, encoder, decoder).data
    h, w = r.shape[:2]
    err = np.mean((r - frame[:h, :w]) ** 2, axis=-1)
    j, k = feature_extent(frame.shape[0]), feature_extent(frame.shape[1])
    return window_means(err, j, k)
