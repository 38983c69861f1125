"""Real-NVP density on the feature space.

The flow is an elementwise affine normalisation (data-initialised, trainable)
followed by affine coupling layers.  Each coupling splits the vector into
contiguous halves, keeps one half and rescales/shifts the other with scale
``S * tanh(mlp_s(kept))`` and shift ``mlp_t(kept)``; the kept half alternates
per layer.  Bounded scales keep every layer comfortably invertible.
"""

from __future__ import annotations

import math

import numpy as np

from .. import grad as G
from ..errors import DimensionError, NumericError
from ..grad.tensor import default_dtype

N_COUPLINGS = 6
HIDDEN = 256
SCALE_BOUND = 2.0
LOG_2PI = math.log(2.0 * math.pi)


def flow_dim(params: dict[str, G.Tensor]) -> int:
    return params["flow.norm.shift"].shape[0]


def n_layers(params: dict[str, G.Tensor]) -> int:
    return sum(1 for k in params if k.endswith(".s.w0"))


def init_flow(
    rng: np.random.Generator,
    dim: int = 128,
    layers: int = N_COUPLINGS,
    hidden: int = HIDDEN,
    zero_output: bool = True,
) -> dict[str, G.Tensor]:
    """Coupling MLPs get fan-in uniform weights; with ``zero_output`` the last
    layer of every MLP starts at zero so the flow starts as the identity."""
    if dim % 2:
        raise DimensionError(f"flow dimension must be even, got {dim}")
    half = dim // 2
    p: dict[str, G.Tensor] = {
        "flow.norm.shift": G.Tensor(np.zeros(dim), requires_grad=True),
        "flow.norm.logscale": G.Tensor(np.zeros(dim), requires_grad=True),
    }
    for l in range(layers):
        for net in ("s", "t"):
            pre = f"flow.{l}.{net}"
            dims = [(half, hidden), (hidden, hidden), (hidden, half)]
            for i, (a, b) in enumerate(dims):
                bound = math.sqrt(6.0 / a)
                w = rng.uniform(-bound, bound, size=(a, b))
                if zero_output and i == 2:
                    w = np.zeros((a, b))
                p[f"{pre}.w{i}"] = G.Tensor(w, requires_grad=True)
                p[f"{pre}.b{i}"] = G.Tensor(np.zeros(b), requires_grad=True)
    return p


def fit_normalization(params: dict[str, G.Tensor], features: np.ndarray) -> None:
    """Set the affine normalisation so training features start standardised."""
    f = np.asarray(features, dtype=np.float64)
    mu = f.mean(axis=0)
    sd = f.std(axis=0) + 1e-6
    params["flow.norm.logscale"].data[...] = -np.log(sd)
    params["flow.norm.shift"].data[...] = -mu / sd


def _mlp(x: G.Tensor, p: dict[str, G.Tensor], pre: str) -> G.Tensor:
    h = G.leaky_relu(G.linear(x, p[f"{pre}.w0"], p[f"{pre}.b0"]))
    h = G.leaky_relu(G.linear(h, p[f"{pre}.w1"], p[f"{pre}.b1"]))
    return G.linear(h, p[f"{pre}.w2"], p[f"{pre}.b2"])


def _halves(l: int, half: int):
    """(kept, transformed) slices for coupling layer ``l``."""
    first, second = slice(0, half), slice(half, None)
    return (first, second) if l % 2 == 0 else (second, first)


def _scale_shift(kept: G.Tensor, p, l: int) -> tuple[G.Tensor, G.Tensor]:
    s = G.mul(G.tanh(_mlp(kept, p, f"flow.{l}.s")), SCALE_BOUND)
    t = _mlp(kept, p, f"flow.{l}.t")
    return s, t


def _check(x: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite values in flow {where}")


def nvp_forward(y, params: dict[str, G.Tensor]) -> tuple[G.Tensor, G.Tensor]:
    """Map features ``(N, d)`` to latents; returns ``(z, log|det J|)`` per row."""
    y = G.as_tensor(y)
    d = flow_dim(params)
    if y.shape[-1] != d:
        raise DimensionError(f"flow expects dimension {d}, got {y.shape}")
    single = y.ndim == 1
    if single:
        y = G.reshape(y, (1, d))
    half = d // 2
    logscale = params["flow.norm.logscale"]
    u = G.add(G.mul(y, G.exp(logscale)), params["flow.norm.shift"])
    log_det = G.mul(G.sum_(logscale), np.ones(y.shape[0]))
    for l in range(n_layers(params)):
        keep, move = _halves(l, half)
        kept, moved = u[:, keep], u[:, move]
        s, t = _scale_shift(kept, params, l)
        moved = G.add(G.mul(moved, G.exp(s)), t)
        _check(moved.data, f"coupling layer {l}")
        u = G.concat([kept, moved] if l % 2 == 0 else [moved, kept], axis=1)
        log_det = G.add(log_det, G.sum_(s, axis=1))
    if single:
        return G.reshape(u, (d,)), G.reshape(log_det, ())
    return u, log_det


def nvp_inverse(z, params: dict[str, G.Tensor]) -> np.ndarray:
    """Exact inverse of ``nvp_forward``'s ``z``."""
    z = np.asarray(z, dtype=default_dtype())
    single = z.ndim == 1
    u = z.reshape(-1, z.shape[-1]).copy()
    half = u.shape[1] // 2
    with G.no_grad():
        for l in reversed(range(n_layers(params))):
            keep, move = _halves(l, half)
            s, t = _scale_shift(G.Tensor(u[:, keep]), params, l)
            u[:, move] = (u[:, move] - t.data) * np.exp(-s.data)
            _check(u, f"inverse coupling layer {l}")
    y = (u - params["flow.norm.shift"].data) * np.exp(-params["flow.norm.logscale"].data)
    return y[0] if single else y


def nvp_nll(y, params: dict[str, G.Tensor]) -> G.Tensor:
    """Per-row negative log-likelihood under a standard-normal prior."""
    z, log_det = nvp_forward(y, params)
    d = flow_dim(params)
    axis = None if z.ndim == 1 else 1
    half_sq = G.mul(G.sum_(G.square(z), axis=axis), 0.5)
    return G.sub(G.add(half_sq, 0.5 * d * LOG_2PI), log_det)


def nvp_loss(y, params: dict[str, G.Tensor]) -> G.Tensor:
    return G.mean(nvp_nll(y, params))


def nvp_score(y: np.ndarray, params: dict[str, G.Tensor], chunk: int = 4096) -> np.ndarray:
    """Per-row NLL (higher = more anomalous)."""
    y = np.asarray(y, dtype=np.float32)
    if y.ndim == 1:
        return nvp_score(y[None], params)[0]
    out = np.empty(len(y), dtype=np.float32)
    with G.no_grad():
        for s in range(0, len(y), chunk):
            out[s : s + chunk] = nvp_nll(y[s : s + chunk], params).data
    return out
