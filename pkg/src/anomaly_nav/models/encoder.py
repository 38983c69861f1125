"""Shared fully-convolutional encoder and its mirrored decoder.

Encoder: three (conv5 -> leaky ReLU) blocks, the first two followed by a 2x2
max-pool, then a linear 1x1 conv.  Channels run ``c -> 32 -> 64 -> 128 -> 128``.
All convolutions are unpadded, so a 32x32 patch maps to a single 128-vector
and a ``H x W`` image maps to a ``j x k`` grid of them, one per 32x32 window
at stride 4.
"""

from __future__ import annotations

import numpy as np

from .. import grad as G
from ..errors import DimensionError

PATCH = 32
STRIDE = 4
FEATURE_DIM = 128
CHANNELS = (32, 64, 128, 128)


def feature_extent(n: int) -> int:
    """Output extent of the encoder along one axis of length ``n``."""
    return ((n - 4) // 2 - 4) // 2 - 4


def feature_shape(h: int, w: int) -> tuple[int, int, int]:
    return feature_extent(h), feature_extent(w), FEATURE_DIM


def reconstruction_extent(j: int) -> int:
    """Decoder output extent for a ``j``-cell feature axis (inverse of the above
    whenever no pooling floor was taken)."""
    return ((j + 4) * 2 + 4) * 2 + 4


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def init_encoder(in_channels: int, rng: np.random.Generator) -> dict[str, G.Tensor]:
    c1, c2, c3, c4 = CHANNELS
    shapes = {
        "enc.conv1": (5, 5, in_channels, c1),
        "enc.conv2": (5, 5, c1, c2),
        "enc.conv3": (5, 5, c2, c3),
        "enc.conv4": (1, 1, c3, c4),
    }
    params = {}
    for name, shp in shapes.items():
        fan_in = shp[0] * shp[1] * shp[2]
        params[name + ".w"] = G.Tensor(_uniform(rng, shp, fan_in), requires_grad=True, name=name)
        params[name + ".b"] = G.Tensor(np.zeros(shp[3]), requires_grad=True, name=name)
    return params


def init_decoder(out_channels: int, rng: np.random.Generator) -> dict[str, G.Tensor]:
    """Transposed-conv kernels stored ``k x k x Cout x Cin`` like the encoder's."""
    c1, c2, c3, c4 = CHANNELS
    shapes = {
        "dec.conv4": (1, 1, c3, c4),
        "dec.conv3": (5, 5, c2, c3),
        "dec.conv2": (5, 5, c1, c2),
        "dec.conv1": (5, 5, out_channels, c1),
    }
    params = {}
    for name, shp in shapes.items():
        fan_in = shp[0] * shp[1] * shp[3]
        params[name + ".w"] = G.Tensor(_uniform(rng, shp, fan_in), requires_grad=True, name=name)
        params[name + ".b"] = G.Tensor(np.zeros(shp[2]), requires_grad=True, name=name)
    return params


def in_channels(encoder: dict[str, G.Tensor]) -> int:
    return encoder["enc.conv1.w"].shape[2]


def encode(x, params: dict[str, G.Tensor]) -> G.Tensor:
    """``(N,) H x W x c -> (N,) j x k x 128``."""
    x = G.as_tensor(x)
    h, w = x.shape[-3], x.shape[-2]
    if h < PATCH or w < PATCH:
        raise DimensionError(f"encoder needs spatial extents >= {PATCH}, got {h}x{w}")
    if x.shape[-1] != in_channels(params):
        raise DimensionError(
            f"encoder expects {in_channels(params)} channels, input has {x.shape[-1]}"
        )
    p = params
    y = G.leaky_relu(G.conv2d_valid(x, p["enc.conv1.w"], p["enc.conv1.b"]))
    y = G.maxpool2(y)
    y = G.leaky_relu(G.conv2d_valid(y, p["enc.conv2.w"], p["enc.conv2.b"]))
    y = G.maxpool2(y)
    y = G.leaky_relu(G.conv2d_valid(y, p["enc.conv3.w"], p["enc.conv3.b"]))
    return G.conv2d_valid(y, p["enc.conv4.w"], p["enc.conv4.b"])


def decode(y, params: dict[str, G.Tensor]) -> G.Tensor:
    """``(N,) j x k x 128 -> (N,) (4j+28) x (4k+28) x c``; 1x1 maps to 32x32."""
    p = params
    y = G.as_tensor(y)
    y = G.leaky_relu(G.conv2d_valid(y, p["dec.conv4.w"], p["dec.conv4.b"]))
    y = G.leaky_relu(G.conv2d_transpose(y, p["dec.conv3.w"], p["dec.conv3.b"]))
    y = G.upsample_nn2(y)
    y = G.leaky_relu(G.conv2d_transpose(y, p["dec.conv2.w"], p["dec.conv2.b"]))
    y = G.upsample_nn2(y)
    return G.conv2d_transpose(y, p["dec.conv1.w"], p["dec.conv1.b"])


def patch_features(x: np.ndarray, params: dict[str, G.Tensor], chunk: int = 512) -> np.ndarray:
    """Frozen-encoder features for a stack of patches, ``(N, 128)``."""
    out = np.empty((len(x), FEATURE_DIM), dtype=np.float32)
    with G.no_grad():
        for s in range(0, len(x), chunk):
            out[s : s + chunk] = encode(x[s : s + chunk], params).data.reshape(-1, FEATURE_DIM)
    return out
