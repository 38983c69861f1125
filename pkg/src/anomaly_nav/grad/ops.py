"""Differentiable operations needed by the fixed encoder/decoder/flow graphs.

Images are channels-last.  Spatial ops accept a single ``H x W x C`` image or
an ``N x H x W x C`` batch and return the same rank they were given.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import DimensionError, NumericError, UsageError
from .tensor import Tensor, as_tensor, grad_enabled, make

LEAKY_SLOPE = 0.01


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# --------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return make(a.data * b.data, (a, b), bw, "mul")


def square(x: Tensor) -> Tensor:
    def bw(g):
        x._accumulate(2.0 * x.data * g)

    return make(x.data * x.data, (x,), bw, "square")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)

    def bw(g):
        x._accumulate(g * out)

    return make(out, (x,), bw, "exp")


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise NumericError("log of a non-positive value")

    def bw(g):
        x._accumulate(g / x.data)

    return make(np.log(x.data), (x,), bw, "log")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)

    def bw(g):
        x._accumulate(g * (1.0 - out * out))

    return make(out, (x,), bw, "tanh")


def relu(x: Tensor) -> Tensor:
    """max(0, x); used for hinge terms."""
    pos = x.data > 0

    def bw(g):
        x._accumulate(g * pos)

    return make(np.where(pos, x.data, 0.0), (x,), bw, "relu")


def leaky_relu(x: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    """Identity for x >= 0, ``slope * x`` below; derivative at 0 is 1."""
    if not 0.0 < slope < 1.0:
        raise UsageError(f"leaky slope must lie in (0, 1), got {slope}")
    pos = x.data >= 0

    def bw(g):
        x._accumulate(np.where(pos, g, slope * g))

    return make(np.where(pos, x.data, slope * x.data), (x,), bw, "leaky_relu")


# --------------------------------------------------------------------------
# reductions and shape plumbing


def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy
    def bw(g):
        if axis is None:
            x._accumulate(np.broadcast_to(g, x.shape))
        else:
            x._accumulate(np.broadcast_to(np.expand_dims(g, axis), x.shape))

    return make(np.sum(x.data, axis=axis), (x,), bw, "sum")


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])

    def bw(g):
        if axis is None:
            x._accumulate(np.broadcast_to(g / n, x.shape))
        else:
            x._accumulate(np.broadcast_to(np.expand_dims(g, axis) / n, x.shape))

    return make(np.mean(x.data, axis=axis), (x,), bw, "mean")


def reshape(x: Tensor, shape) -> Tensor:
    def bw(g):
        x._accumulate(g.reshape(x.shape))

    return make(x.data.reshape(shape), (x,), bw, "reshape")


def getitem(x: Tensor, idx) -> Tensor:
    def bw(g):
        full = np.zeros_like(x.data)
        full[idx] = g
        x._accumulate(full)

    return make(x.data[idx], (x,), bw, "getitem")


def concat(xs, axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        for x, part in zip(xs, np.split(g, cuts, axis=axis)):
            if x.requires_grad:
                x._accumulate(part)

    return make(np.concatenate([x.data for x in xs], axis=axis), xs, bw, "concat")


# --------------------------------------------------------------------------
# dense layers


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` for ``x`` of shape ``(n,)`` or ``(N, n)``."""
    if x.shape[-1] != weight.shape[0] or weight.ndim != 2:
        raise DimensionError(f"linear: input {x.shape} vs weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise DimensionError(f"linear: bias {bias.shape} vs weight {weight.shape}")
    out = x.data @ weight.data
    if bias is not None:
        out = out + bias.data

    def bw(g):
        if x.requires_grad:
            x._accumulate(g @ weight.data.T)
        if weight.requires_grad:
            if x.ndim == 1:
                weight._accumulate(np.outer(x.data, g))
            else:
                weight._accumulate(x.data.T @ g)
        if bias is not None and bias.requires_grad:
            bias._accumulate(g if g.ndim == 1 else g.sum(axis=0))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make(out, parents, bw, "linear")


# --------------------------------------------------------------------------
# spatial layers (NHWC)


def _batched(x: Tensor, opname: str) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x.data[None], True
    if x.ndim == 4:
        return x.data, False
    raise DimensionError(f"{opname}: expected HxWxC or NxHxWxC, got shape {x.shape}")


def _patches(x: np.ndarray, k: int) -> np.ndarray:
    """``(N, H, W, C) -> (N, Ho, Wo, k, k, C)`` contiguous window copy."""
    v = sliding_window_view(x, (k, k), axis=(1, 2))
    return np.ascontiguousarray(v.transpose(0, 1, 2, 4, 5, 3))


def _corr_valid(x: np.ndarray, w: np.ndarray, cols: np.ndarray | None = None) -> np.ndarray:
    """Valid cross-correlation, ``w`` is ``k x k x Cin x Cout``."""
    k, _, cin, cout = w.shape
    n, h, wd, _ = x.shape
    if k == 1:
        return (x.reshape(-1, cin) @ w[0, 0]).reshape(n, h, wd, cout)
    if cols is None:
        cols = _patches(x, k)
    ho, wo = cols.shape[1:3]
    return (cols.reshape(-1, k * k * cin) @ w.reshape(-1, cout)).reshape(n, ho, wo, cout)


def _corr_full_t(g: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Adjoint of ``_corr_valid`` in its input: scatter ``g`` (``... x Cout``)
    through ``w`` back to a ``(h+k-1) x (w+k-1) x Cin`` map."""
    k, _, cin, cout = w.shape
    n, h, wd, _ = g.shape
    if k == 1:
        return (g.reshape(-1, cout) @ w[0, 0].T).reshape(n, h, wd, cin)
    if (h + k - 1) * (wd + k - 1) * cout < h * wd * cin:
        # fewer bytes moved as a valid correlation over the zero-padded input
        gp = np.pad(g, ((0, 0), (k - 1, k - 1), (k - 1, k - 1), (0, 0)))
        return _corr_valid(gp, np.ascontiguousarray(w[::-1, ::-1].transpose(0, 1, 3, 2)))
    # batch axis innermost so each shifted add touches long contiguous runs
    gt = np.ascontiguousarray(g.transpose(3, 1, 2, 0)).reshape(cout, -1)
    p = (w.reshape(-1, cout) @ gt).reshape(k, k, cin, h, wd, n)
    out = np.zeros((cin, h + k - 1, wd + k - 1, n), dtype=g.dtype)
    for a in range(k):
        for b in range(k):
            out[:, a : a + h, b : b + wd, :] += p[a, b]
    return np.ascontiguousarray(out.transpose(3, 1, 2, 0))


def _kernel_grad(x: np.ndarray, g: np.ndarray, k: int, cols: np.ndarray | None = None) -> np.ndarray:
    """d/dw of ``sum(g * corr_valid(x, w))`` as ``k x k x Cin x Cout``."""
    cin, cout = x.shape[-1], g.shape[-1]
    if k == 1:
        return (x.reshape(-1, cin).T @ g.reshape(-1, cout)).reshape(1, 1, cin, cout)
    cols = (_patches(x, k) if cols is None else cols).reshape(-1, k * k * cin)
    return (cols.T @ g.reshape(-1, cout)).reshape(k, k, cin, cout)


def _check_kernel(x: np.ndarray, weight: Tensor, bias, cin_axis: int, opname: str) -> None:
    if weight.ndim != 4 or weight.shape[0] != weight.shape[1]:
        raise DimensionError(f"{opname}: kernel must be k x k x Cin x Cout, got {weight.shape}")
    if x.shape[-1] != weight.shape[cin_axis]:
        raise DimensionError(
            f"{opname}: input channels (axis -1) = {x.shape[-1]} but kernel axis "
            f"{cin_axis} = {weight.shape[cin_axis]}"
        )
    out_axis = 3 if cin_axis == 2 else 2
    if bias is not None and bias.shape != (weight.shape[out_axis],):
        raise DimensionError(f"{opname}: bias {bias.shape} vs kernel {weight.shape}")


def conv2d_valid(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Unpadded cross-correlation: ``H x W x Cin -> (H-k+1) x (W-k+1) x Cout``."""
    xb, single = _batched(x, "conv2d_valid")
    _check_kernel(xb, weight, bias, 2, "conv2d_valid")
    k = weight.shape[0]
    if xb.shape[1] < k or xb.shape[2] < k:
        raise DimensionError(
            f"conv2d_valid: spatial extents (axes 1,2) {xb.shape[1:3]} smaller than kernel {k}"
        )
    # the window copy is reused for the kernel gradient when one is needed
    cols = _patches(xb, k) if k > 1 and weight.requires_grad and grad_enabled() else None
    out = _corr_valid(xb, weight.data, cols)
    if bias is not None:
        out = out + bias.data

    def bw(g):
        gb = g[None] if single else g
        if x.requires_grad:
            gx = _corr_full_t(gb, weight.data)
            x._accumulate(gx[0] if single else gx)
        if weight.requires_grad:
            weight._accumulate(_kernel_grad(xb, gb, k, cols))
        if bias is not None and bias.requires_grad:
            bias._accumulate(gb.sum(axis=(0, 1, 2)))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make(out[0] if single else out, parents, bw, "conv2d_valid")


def conv2d_transpose(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Transposed (full) convolution, the spatial adjoint of ``conv2d_valid``.

    ``weight`` is ``k x k x Cout x Cin`` (the shape of the valid conv it
    mirrors), mapping ``h x w x Cin`` to ``(h+k-1) x (w+k-1) x Cout``.
    """
    xb, single = _batched(x, "conv2d_transpose")
    _check_kernel(xb, weight, bias, 3, "conv2d_transpose")
    k = weight.shape[0]
    out = _corr_full_t(xb, weight.data)
    if bias is not None:
        out = out + bias.data

    def bw(g):
        gb = g[None] if single else g
        if x.requires_grad:
            gx = _corr_valid(gb, weight.data)
            x._accumulate(gx[0] if single else gx)
        if weight.requires_grad:
            weight._accumulate(_kernel_grad(gb, xb, k))
        if bias is not None and bias.requires_grad:
            bias._accumulate(gb.sum(axis=(0, 1, 2)))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make(out[0] if single else out, parents, bw, "conv2d_transpose")


def maxpool2(x: Tensor) -> Tensor:
    """2x2 non-overlapping max; odd trailing rows/columns are dropped."""
    xb, single = _batched(x, "maxpool2")
    n, h, w, c = xb.shape
    if h < 2 or w < 2:
        raise DimensionError(f"maxpool2: spatial extents {h}x{w} below 2")
    ho, wo = h // 2, w // 2
    blocks = (
        xb[:, : 2 * ho, : 2 * wo]
        .reshape(n, ho, 2, wo, 2, c)
        .transpose(0, 1, 3, 5, 2, 4)
        .reshape(n, ho, wo, c, 4)
    )
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gb = g[None] if single else g
        routed = (np.arange(4) == arg[..., None]) * gb[..., None]
        routed = routed.reshape(n, ho, wo, c, 2, 2).transpose(0, 1, 4, 2, 5, 3)
        full = np.zeros_like(xb)
        full[:, : 2 * ho, : 2 * wo] = routed.reshape(n, 2 * ho, 2 * wo, c)
        x._accumulate(full[0] if single else full)

    return make(out[0] if single else out, (x,), bw, "maxpool2")


def upsample_nn2(x: Tensor) -> Tensor:
    """Nearest-neighbour x2: every cell becomes a 2x2 block."""
    xb, single = _batched(x, "upsample_nn2")
    n, h, w, c = xb.shape
    out = np.repeat(np.repeat(xb, 2, axis=1), 2, axis=2)

    def bw(g):
        gb = g[None] if single else g
        gx = gb.reshape(n, h, 2, w, 2, c).sum(axis=(2, 4))
        x._accumulate(gx[0] if single else gx)

    return make(out[0] if single else out, (x,), bw, "upsample_nn2")
