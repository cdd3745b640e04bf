"""Differentiable primitives.

Every function takes and returns :class:`Tensor` objects. Backward closures
receive the upstream gradient as a numpy array and return one gradient (or
``None``) per input, in input order.
"""

from __future__ import annotations

import itertools
import math
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from .core import ShapeError, Tensor, as_tensor, make_result
from .rng import Rng

IntOrTuple = Union[int, Sequence[int]]

# Upper bound on im2col buffer elements before convolutions split the batch.
_COL_BUDGET = 48_000_000


def _pair(value: IntOrTuple, n: int) -> Tuple[int, ...]:
    if isinstance(value, int):
        return (value,) * n
    out = tuple(int(v) for v in value)
    if len(out) != n:
        raise ShapeError(f"expected {n} values, got {out}")
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _coerce(a, b) -> Tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return as_tensor(a), as_tensor(b)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _coerce(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _coerce(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _coerce(a, b)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(a.data * b.data, (a, b), backward, "mul")


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return make_result(x.data * x.dtype.type(c), (x,), lambda g: (g * c,), "scale")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_result(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    """Logistic function in the two-branch form that never overflows."""
    z = x.data
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return make_result(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return make_result(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise ValueError("log of non-positive value")
    return make_result(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    inside = (x.data >= lo) & (x.data <= hi)
    return make_result(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,), "clamp")


_POINTWISE_UNARY = {"relu": relu, "sigmoid": sigmoid, "log": log, "exp": exp}


def pointwise(x: Tensor, kind: str, other=None) -> Tensor:
    """Dispatch an elementwise op by name (relu|sigmoid|log|exp|add|mul|scale)."""
    if kind in _POINTWISE_UNARY:
        return _POINTWISE_UNARY[kind](x)
    if kind == "add":
        return add(x, other)
    if kind == "mul":
        return mul(x, other)
    if kind == "scale":
        return scale(x, other)
    raise ValueError(f"unknown pointwise op {kind!r}")


# ---------------------------------------------------------------------------
# reductions and shape
# ---------------------------------------------------------------------------


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.dtype, copy=True),)

    return make_result(np.asarray(out), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([x.shape[a] for a in axes]))
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    out = x.data.reshape(shape)
    return make_result(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(np.transpose(x.data, axes))
    return make_result(out, (x,), lambda g: (np.transpose(g, inverse),), "transpose")


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat of an empty list")
    ndim = parts[0].ndim
    axis = axis % ndim
    ref = parts[0].shape
    for p in parts[1:]:
        if p.ndim != ndim or any(p.shape[i] != ref[i] for i in range(ndim) if i != axis):
            raise ShapeError(f"concat off-axis mismatch: {ref} vs {p.shape} along axis {axis}")
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([p.data for p in parts], axis=axis)

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(parts))
        )

    return make_result(out, parts, backward, "concat")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batching rules for leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, (a, b), backward, "matmul")


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """``x @ w + b`` with ``w`` stored as (in, out)."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"linear dimension mismatch: x {x.shape}, w {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeError(f"linear bias shape {b.shape} does not match width {w.shape[1]}")
    out = x.data @ w.data
    if b is not None:
        out = out + b.data

    def backward(g):
        gx = g @ w.data.T if x.requires_grad else None
        gw = x.data.T @ g if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    parents = (x, w) if b is None else (x, w, b)
    return make_result(out, parents, backward, "linear")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result(out, (x,), backward, "softmax")


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def conv_output_size(extent: int, kernel: int, stride: int, pad: int) -> int:
    return (extent + 2 * pad - kernel) // stride + 1


def _offset_slices(offs, stride, out_sp) -> tuple:
    """Spatial slices picking, for every output position, the input at kernel offset ``offs``."""
    return (slice(None), slice(None)) + tuple(
        slice(o, o + st * (n - 1) + 1, st) for o, st, n in zip(offs, stride, out_sp)
    )


def _kernel_offsets(kernel):
    return enumerate(itertools.product(*(range(k) for k in kernel)))


def _im2col(xp: np.ndarray, kernel, stride, out_sp) -> np.ndarray:
    """Columns (C*prod(K), B*prod(O)), filled with one strided copy per kernel offset."""
    B, C = xp.shape[:2]
    cols = np.empty((C, int(np.prod(kernel)), B) + tuple(out_sp), dtype=xp.dtype)
    for k, offs in _kernel_offsets(kernel):
        cols[:, k] = xp[_offset_slices(offs, stride, out_sp)].swapaxes(0, 1)
    return cols.reshape(cols.shape[0] * cols.shape[1], -1)


def _pad_spatial(x: np.ndarray, padding, value=0.0) -> np.ndarray:
    if not any(padding):
        return x
    widths = [(0, 0), (0, 0)] + [(p, p) for p in padding]
    return np.pad(x, widths, mode="constant", constant_values=value)


def _batch_chunks(batch: int, per_item: int):
    step = max(1, _COL_BUDGET // max(per_item, 1))
    for start in range(0, batch, step):
        yield start, min(batch, start + step)


def convnd(
    x: Tensor,
    w: Tensor,
    b: Optional[Tensor] = None,
    stride: IntOrTuple = 1,
    padding: IntOrTuple = 0,
) -> Tensor:
    """N-d cross-correlation over the trailing ``w.ndim - 2`` axes.

    ``x`` is (B, C, *S) and ``w`` is (F, C, *K). Windows are materialised
    with im2col in batch chunks so memory stays bounded for large video
    inputs; the backward pass recomputes the columns instead of storing them.
    """
    nd = w.ndim - 2
    if x.ndim != nd + 2:
        raise ShapeError(f"conv{nd}d expects a rank-{nd + 2} input, got shape {x.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv{nd}d channel mismatch: input {x.shape}, kernel {w.shape}")
    stride = _pair(stride, nd)
    padding = _pair(padding, nd)
    kernel = w.shape[2:]
    spatial = x.shape[2:]
    for s, k, p in zip(spatial, kernel, padding):
        if k > s + 2 * p:
            raise ShapeError(
                f"conv{nd}d kernel {kernel} larger than padded input {tuple(e + 2 * q for e, q in zip(spatial, padding))}"
            )
    out_sp = tuple(conv_output_size(s, k, st, p) for s, k, st, p in zip(spatial, kernel, stride, padding))
    B, C = x.shape[:2]
    F = w.shape[0]
    n_out = int(np.prod(out_sp))
    ck = C * int(np.prod(kernel))
    wmat = w.data.reshape(F, ck)
    xp = _pad_spatial(x.data, padding)

    out = np.empty((B, F) + out_sp, dtype=np.result_type(x.dtype, w.dtype))
    for lo, hi in _batch_chunks(B, n_out * ck):
        # (b*n_out, F); BLAS handles the skinny product much better in this orientation
        res = _im2col(xp[lo:hi], kernel, stride, out_sp).T @ wmat.T
        out[lo:hi] = np.moveaxis(res.reshape((hi - lo,) + out_sp + (F,)), -1, 1)
    if b is not None:
        out += b.data.reshape((1, F) + (1,) * nd)

    def backward(g):
        gw = np.zeros_like(wmat) if w.requires_grad else None
        gx = np.zeros_like(xp) if x.requires_grad else None
        for lo, hi in _batch_chunks(B, n_out * ck):
            gm = np.ascontiguousarray(g[lo:hi].swapaxes(0, 1)).reshape(F, -1)
            if gw is not None:
                gw += gm @ _im2col(xp[lo:hi], kernel, stride, out_sp).T
            if gx is not None:
                dcols = (wmat.T @ gm).reshape((C, -1, hi - lo) + out_sp)
                target = gx[lo:hi]
                for k, offs in _kernel_offsets(kernel):
                    target[_offset_slices(offs, stride, out_sp)] += dcols[:, k].swapaxes(0, 1)
        grads = []
        if gx is not None:
            crop = (slice(None), slice(None)) + tuple(slice(p, p + s) for p, s in zip(padding, spatial))
            grads.append(gx[crop])
        else:
            grads.append(None)
        grads.append(gw.reshape(w.shape) if gw is not None else None)
        if b is not None:
            grads.append(g.sum(axis=(0,) + tuple(range(2, 2 + nd))))
        return grads

    parents = (x, w) if b is None else (x, w, b)
    return make_result(out, parents, backward, f"conv{nd}d")


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: IntOrTuple = 1, padding: IntOrTuple = 0) -> Tensor:
    if w.ndim != 4:
        raise ShapeError(f"conv2d kernel must be (F, C, kh, kw), got {w.shape}")
    return convnd(x, w, b, stride, padding)


def conv3d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: IntOrTuple = 1, padding: IntOrTuple = 0) -> Tensor:
    if w.ndim != 5:
        raise ShapeError(f"conv3d kernel must be (F, C, kd, kh, kw), got {w.shape}")
    return convnd(x, w, b, stride, padding)


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------


def _axis_taps(axis: int, k: int, stride: int, n_out: int):
    lead = (slice(None),) * axis
    return [lead + (slice(j, j + stride * (n_out - 1) + 1, stride),) for j in range(k)]


def max_poolnd(
    x: Tensor,
    kernel: Sequence[int],
    stride: Optional[Sequence[int]] = None,
    padding: IntOrTuple = 0,
) -> Tensor:
    """Max pooling over the trailing ``len(kernel)`` axes.

    Computed separably, one 1-D pass per axis from the last axis to the
    first. Gradients are routed to one arg-max per window; the backward
    passes walk the axes in reverse and take the first maximum along each,
    which selects the lowest flat index inside the window on ties.
    """
    nd = len(kernel)
    kernel = tuple(int(k) for k in kernel)
    stride = kernel if stride is None else _pair(stride, nd)
    padding = _pair(padding, nd)
    spatial = x.shape[2:]
    if x.ndim != nd + 2:
        raise ShapeError(f"max_pool{nd}d expects rank {nd + 2}, got shape {x.shape}")
    for s, k, p in zip(spatial, kernel, padding):
        if k > s + 2 * p:
            raise ShapeError(f"pool window {kernel} exceeds extent {spatial}")
        if 2 * p > k:
            raise ShapeError(f"pool padding {padding} exceeds half the window {kernel}")
    stages = []
    cur = _pad_spatial(x.data, padding, value=-np.inf)
    for i in reversed(range(nd)):
        axis = 2 + i
        n_out = conv_output_size(cur.shape[axis], kernel[i], stride[i], 0)
        taps = _axis_taps(axis, kernel[i], stride[i], n_out)
        out = cur[taps[0]].copy()
        for t in taps[1:]:
            np.maximum(out, cur[t], out=out)
        stages.append((cur, out, taps))
        cur = out

    def backward(g):
        for src, res, taps in reversed(stages):
            gsrc = np.zeros(src.shape, dtype=g.dtype)
            free = np.ones(res.shape, dtype=bool)
            for t in taps:
                hit = src[t] == res
                hit &= free
                free &= ~hit
                gsrc[t] += g * hit
            g = gsrc
        crop = (slice(None), slice(None)) + tuple(slice(p, p + s) for p, s in zip(padding, spatial))
        return (g[crop],)

    return make_result(np.ascontiguousarray(cur), (x,), backward, f"max_pool{nd}d")


def max_pool2d(x: Tensor, kernel=(2, 2), stride=None, padding=0) -> Tensor:
    return max_poolnd(x, _pair(kernel, 2), stride, padding)


def max_pool3d(x: Tensor, kernel=(2, 2, 2), stride=None, padding=0) -> Tensor:
    return max_poolnd(x, _pair(kernel, 3), stride, padding)


def adaptive_bins(extent: int, target: int):
    """Canonical partition: cell i covers [floor(i*n/t), ceil((i+1)*n/t))."""
    return [((i * extent) // target, -((-(i + 1) * extent) // target)) for i in range(target)]


def _averaging_matrix(extent: int, target: int, dtype) -> np.ndarray:
    m = np.zeros((target, extent), dtype=dtype)
    for i, (lo, hi) in enumerate(adaptive_bins(extent, target)):
        m[i, lo:hi] = 1.0 / (hi - lo)
    return m


def adaptive_avg_pool(x: Tensor, target: IntOrTuple) -> Tensor:
    """Average over the canonical bin partition of each trailing spatial axis.

    Bins are axis-aligned boxes, so the cell mean factors into one
    averaging matrix per axis.
    """
    nd = x.ndim - 2
    target = _pair(target, nd)
    if any(t < 1 for t in target):
        raise ShapeError(f"adaptive pool target must be >= 1, got {target}")
    mats = [_averaging_matrix(n, t, x.dtype) for n, t in zip(x.shape[2:], target)]
    out = x.data
    for i, m in enumerate(mats):
        out = np.moveaxis(np.tensordot(out, m, axes=([2 + i], [1])), -1, 2 + i)

    def backward(g):
        for i, m in enumerate(mats):
            g = np.moveaxis(np.tensordot(g, m, axes=([2 + i], [0])), -1, 2 + i)
        return (np.ascontiguousarray(g),)

    return make_result(np.ascontiguousarray(out), (x,), backward, "adaptive_avg_pool")


def pool(x: Tensor, kind: str, size: IntOrTuple, stride=None, padding=0) -> Tensor:
    """Dispatch pooling by kind: ``max2d``, ``max3d`` (window) or ``adaptive_avg`` (target)."""
    if kind == "max2d":
        return max_pool2d(x, size, stride, padding)
    if kind == "max3d":
        return max_pool3d(x, size, stride, padding)
    if kind == "adaptive_avg":
        return adaptive_avg_pool(x, size)
    raise ValueError(f"unknown pool kind {kind!r}")


# ---------------------------------------------------------------------------
# normalisation and regularisation
# ---------------------------------------------------------------------------


class BatchNormState:
    """Per-channel affine parameters plus running statistics."""

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1, dtype=np.float32):
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.eps = eps
        self.momentum = momentum

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


def batch_norm(x: Tensor, state: BatchNormState, train: bool) -> Tensor:
    """Normalise channel axis 1 with batch (train) or running (eval) statistics.

    Train mode updates the running estimates in place, using the unbiased
    batch variance for the running variance.
    """
    C = x.shape[1]
    if C != state.channels:
        raise ShapeError(f"batch_norm expects {state.channels} channels, got shape {x.shape}")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, C) + (1,) * (x.ndim - 2)
    gamma = state.gamma.data.reshape(bshape)
    beta = state.beta.data.reshape(bshape)
    if train:
        count = x.size // C
        mu = x.data.mean(axis=axes, keepdims=True)
        centered = x.data - mu
        var = (centered * centered).mean(axis=axes, keepdims=True)
        m = state.momentum
        unbiased = var.reshape(C) * (count / max(count - 1, 1))
        state.running_mean[...] = (1 - m) * state.running_mean + m * mu.reshape(C)
        state.running_var[...] = (1 - m) * state.running_var + m * unbiased
    else:
        count = None
        centered = x.data - state.running_mean.reshape(bshape)
        var = state.running_var.reshape(bshape)
    inv_std = 1.0 / np.sqrt(var + state.eps)
    xhat = centered * inv_std
    out = (xhat * gamma + beta).astype(x.dtype, copy=False)

    def backward(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        if not x.requires_grad:
            return None, ggamma, gbeta
        gxhat = g * gamma
        if train:
            gx = inv_std * (
                gxhat
                - gxhat.mean(axis=axes, keepdims=True)
                - xhat * (gxhat * xhat).mean(axis=axes, keepdims=True)
            )
        else:
            gx = gxhat * inv_std
        return gx.astype(x.dtype, copy=False), ggamma, gbeta

    return make_result(out, (x, state.gamma, state.beta), backward, "batch_norm")


def dropout(x: Tensor, p: float, train: bool, rng: Optional[Rng] = None) -> Tensor:
    """Inverted dropout: zero with probability ``p``, scale survivors by 1/(1-p)."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not train or p == 0.0:
        return x
    if rng is None:
        raise ValueError("train-mode dropout needs an Rng")
    keep = rng.random(x.shape) >= p
    mask = keep.astype(x.dtype) * x.dtype.type(1.0 / (1.0 - p))
    return make_result(x.data * mask, (x,), lambda g: (g * mask,), "dropout")


# ---------------------------------------------------------------------------
# initialisation helpers
# ---------------------------------------------------------------------------


def kaiming_uniform(shape: Sequence[int], fan_in: int, rng: Rng, dtype=np.float32) -> Tensor:
    bound = math.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, tuple(shape)).astype(dtype), requires_grad=True)


def zeros(shape: Sequence[int], dtype=np.float32, requires_grad: bool = True) -> Tensor:
    return Tensor(np.zeros(tuple(shape), dtype=dtype), requires_grad=requires_grad)
