"""Differentiable tensor operations.

Every op computes its forward result with numpy and, when recording, registers
a closure returning one gradient per input (``None`` for non-differentiable
inputs). Ops never broadcast beyond numpy's elementwise rules; ``matmul`` only
broadcasts leading batch extents.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from mvad.errors import GeometryError, IndexOutOfRangeError, ShapeError
from mvad.tensor import Tensor, as_tensor, make_result

LN_EPS = 1e-5
COS_EPS = 1e-8
_GELU_C = math.sqrt(2.0 / math.pi)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _axis(dim: int, ndim: int) -> int:
    if not -ndim <= dim < ndim:
        raise ShapeError(f"dim {dim} out of range for a {ndim}-d tensor")
    return dim % ndim


# -- Elementwise --


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError as e:
        raise ShapeError(f"add: cannot broadcast {a.shape} with {b.shape}") from e

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result("add", data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data - b.data
    except ValueError as e:
        raise ShapeError(f"sub: cannot broadcast {a.shape} with {b.shape}") from e

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_result("sub", data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError as e:
        raise ShapeError(f"mul: cannot broadcast {a.shape} with {b.shape}") from e

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return make_result("mul", data, (a, b), backward)


def scale(x: Tensor, factor: float) -> Tensor:
    factor = float(factor)

    def backward(g):
        return (g * factor,)

    return make_result("scale", x.data * factor, (x,), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward(g):
        return (g * mask,)

    return make_result("relu", x.data * mask, (x,), backward)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation: 0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))."""
    u = x.data
    t = np.tanh(_GELU_C * (u + 0.044715 * u**3))

    def backward(g):
        dt = (1.0 - t**2) * _GELU_C * (1.0 + 3 * 0.044715 * u**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * u * dt),)

    return make_result("gelu", 0.5 * u * (1.0 + t), (x,), backward)


# -- Reductions --


def sum(x: Tensor, dim: int | None = None, keepdim: bool = False) -> Tensor:
    if dim is None:
        data = np.asarray(x.data.sum())

        def backward(g):
            return (np.broadcast_to(g, x.shape).copy(),)

        return make_result("sum", data, (x,), backward)

    axis = _axis(dim, x.ndim)
    data = x.data.sum(axis=axis, keepdims=keepdim)

    def backward(g):
        g = g if keepdim else np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_result("sum", data, (x,), backward)


def mean(x: Tensor, dim: int | None = None, keepdim: bool = False) -> Tensor:
    if dim is None:
        return scale(sum(x), 1.0 / x.data.size)
    axis = _axis(dim, x.ndim)
    return scale(sum(x, axis, keepdim), 1.0 / x.shape[axis])


# -- Shape plumbing --


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        data = x.data.reshape(tuple(shape))
    except ValueError as e:
        raise ShapeError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from e

    def backward(g):
        return (g.reshape(x.shape),)

    return make_result("reshape", data, (x,), backward)


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"permute: {axes} is not a permutation of {x.ndim} axes")
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inverse),)

    return make_result("permute", np.transpose(x.data, axes), (x,), backward)


def slice(x: Tensor, key) -> Tensor:
    """Basic indexing (ints and slices only)."""
    key = key if isinstance(key, tuple) else (key,)
    for k in key:
        if not isinstance(k, (int, type(Ellipsis))) and not hasattr(k, "indices"):
            raise ShapeError(f"slice: only ints and slices are supported, got {k!r}")
    data = x.data[key]

    def backward(g):
        out = np.zeros_like(x.data)
        out[key] = g
        return (out,)

    return make_result("slice", data, (x,), backward)


def concat(tensors: Sequence[Tensor], dim: int = 0) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ShapeError("concat: need at least one tensor")
    axis = _axis(dim, tensors[0].ndim)
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from e
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make_result("concat", data, tensors, backward)


def stack(tensors: Sequence[Tensor], dim: int = 0) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ShapeError("stack: need at least one tensor")
    expanded = [reshape(t, t.shape[:dim] + (1,) + t.shape[dim:]) for t in tensors]
    return concat(expanded, dim)


def gather(x: Tensor, dim: int, index) -> Tensor:
    """Take entries of ``x`` along ``dim`` at integer ``index`` (any shape).

    Output shape is ``x.shape[:dim] + index.shape + x.shape[dim+1:]``.
    Backward scatters (accumulates) the gradient to the source positions.
    """
    axis = _axis(dim, x.ndim)
    index = np.asarray(index)
    if index.dtype.kind not in "iu":
        raise IndexOutOfRangeError(f"gather: index must be integral, got {index.dtype}")
    if index.size and (index.min() < 0 or index.max() >= x.shape[axis]):
        raise IndexOutOfRangeError(
            f"gather: index range [{index.min()}, {index.max()}] outside [0, {x.shape[axis]})"
        )
    data = np.take(x.data, index, axis=axis)

    def backward(g):
        out = np.zeros_like(x.data)
        moved = np.moveaxis(out, axis, 0)
        g_moved = np.moveaxis(g, tuple(range(axis, axis + index.ndim)), tuple(range(index.ndim)))
        np.add.at(moved, index, g_moved)
        return (out,)

    return make_result("gather", data, (x,), backward)


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    """Nearest-neighbour upsampling of the last two (spatial) dims."""
    if factor < 1:
        raise ShapeError(f"upsample_nearest: factor must be >= 1, got {factor}")
    data = np.repeat(np.repeat(x.data, factor, axis=-2), factor, axis=-1)
    h, w = x.shape[-2:]

    def backward(g):
        g = g.reshape(g.shape[:-2] + (h, factor, w, factor))
        return (g.sum(axis=(-3, -1)),)

    return make_result("upsample_nearest", data, (x,), backward)


# -- Linear algebra --


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product ``[..., m, n] @ [..., n, p]``."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: both operands need >= 2 dims, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")
    try:
        data = np.matmul(a.data, b.data)
    except ValueError as e:
        raise ShapeError(f"matmul: batch extents not broadcastable, {a.shape} @ {b.shape}") from e

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return make_result("matmul", data, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Token-wise ``x @ weight (+ bias)`` with weight stored as [c_in, c_out]."""
    out = matmul(x, weight) if x.ndim >= 2 else matmul(reshape(x, (1, -1)), weight)
    if bias is not None:
        out = add(out, bias)
    return out


def softmax(x: Tensor, dim: int = -1) -> Tensor:
    axis = _axis(dim, x.ndim)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return make_result("softmax", y, (x,), backward)


def layer_norm(
    x: Tensor,
    dim: int,
    gamma: Tensor,
    beta: Tensor,
    eps: float = LN_EPS,
) -> Tensor:
    """Normalize each slice along ``dim`` to zero mean / unit variance, then scale and shift."""
    axis = _axis(dim, x.ndim)
    n = x.shape[axis]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise ShapeError(
            f"layer_norm: gamma/beta must have shape ({n},), got {gamma.shape} and {beta.shape}"
        )
    bshape = [1] * x.ndim
    bshape[axis] = n
    g_b = gamma.data.reshape(bshape)
    mu = x.data.mean(axis=axis, keepdims=True)
    centered = x.data - mu
    var = (centered**2).mean(axis=axis, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    data = xhat * g_b + beta.data.reshape(bshape)
    reduce_axes = tuple(i for i in range(x.ndim) if i != axis)

    def backward(g):
        dxhat = g * g_b
        dx = (
            inv_std
            / n
            * (
                n * dxhat
                - dxhat.sum(axis=axis, keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=axis, keepdims=True)
            )
        )
        dgamma = (g * xhat).sum(axis=reduce_axes)
        dbeta = g.sum(axis=reduce_axes)
        return dx, dgamma, dbeta

    return make_result("layer_norm", data, (x, gamma, beta), backward)


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    pad: int = 0,
) -> Tensor:
    """Cross-correlation of ``x[b, c_in, h, w]`` with ``weight[c_out, c_in, kh, kw]``."""
    if x.ndim != 4 or weight.ndim != 4:
        raise GeometryError(
            f"conv2d: expected 4-d input and weight, got {x.shape}, {weight.shape}"
        )
    b, c_in, h, w = x.shape
    c_out, wc_in, kh, kw = weight.shape
    if wc_in != c_in:
        raise GeometryError(f"conv2d: input has {c_in} channels, weight expects {wc_in}")
    if stride not in (1, 2):
        raise GeometryError(f"conv2d: stride must be 1 or 2, got {stride}")
    if pad < 0 or h + 2 * pad < kh or w + 2 * pad < kw:
        raise GeometryError(f"conv2d: kernel {kh}x{kw} does not fit {h}x{w} with pad={pad}")
    if bias is not None and bias.shape != (c_out,):
        raise GeometryError(f"conv2d: bias must have shape ({c_out},), got {bias.shape}")

    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    windows = windows[:, :, :oh, :ow]
    # One GEMM per image, so an image never depends on its batchmates.
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(b, oh * ow, c_in * kh * kw)
    data = np.matmul(cols, weight.data.reshape(c_out, -1).T)
    data = data.reshape(b, oh, ow, c_out).transpose(0, 3, 1, 2)
    if bias is not None:
        data = data + bias.data.reshape(1, c_out, 1, 1)

    def backward(g):
        gw = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                contrib = np.tensordot(g, weight.data[:, :, i, j], axes=([1], [0]))
                gxp[
                    :,
                    :,
                    i : i + stride * (oh - 1) + 1 : stride,
                    j : j + stride * (ow - 1) + 1 : stride,
                ] += contrib.transpose(0, 3, 1, 2)
        gx = gxp[:, :, pad : pad + h, pad : pad + w] if pad else gxp
        grads = [np.ascontiguousarray(gx), gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_result("conv2d", np.ascontiguousarray(data), inputs, backward)


# -- Losses and similarities --


def mse_loss(a: Tensor, b: Tensor) -> Tensor:
    """(1/(H·W))·Σ(a−b)² over the trailing spatial map, channels summed.

    Inputs are ``[..., H, W]``; for 4-d ``[N, C, H, W]`` the result is also
    averaged over the batch extent N.
    """
    if a.shape != b.shape:
        raise ShapeError(f"mse_loss: shapes differ, {a.shape} vs {b.shape}")
    if a.ndim < 2:
        raise ShapeError(f"mse_loss: need a spatial map [..., H, W], got {a.shape}")
    spatial = a.shape[-2] * a.shape[-1]
    batch = int(np.prod(a.shape[:-3])) if a.ndim > 3 else 1
    diff = sub(a, b)
    return scale(sum(mul(diff, diff)), 1.0 / (spatial * batch))


def cosine_similarity(a: Tensor, b: Tensor, dim: int = -1, eps: float = COS_EPS) -> Tensor:
    """a·b / (max(‖a‖, eps)·max(‖b‖, eps)) along ``dim``."""
    if a.shape != b.shape:
        raise ShapeError(f"cosine_similarity: shapes differ, {a.shape} vs {b.shape}")
    axis = _axis(dim, a.ndim)
    na = np.sqrt((a.data**2).sum(axis=axis, keepdims=True))
    nb = np.sqrt((b.data**2).sum(axis=axis, keepdims=True))
    da, db = np.maximum(na, eps), np.maximum(nb, eps)
    dot = (a.data * b.data).sum(axis=axis, keepdims=True)
    data = np.squeeze(dot / (da * db), axis=axis)

    def backward(g):
        g = np.expand_dims(g, axis)
        # d max(n, eps)/dx is x/n above the clamp and 0 below it.
        dda = np.where(na > eps, a.data / np.where(na > 0, na, 1.0), 0.0)
        ddb = np.where(nb > eps, b.data / np.where(nb > 0, nb, 1.0), 0.0)
        ga = g * (b.data / (da * db) - dot * dda / (da**2 * db))
        gb = g * (a.data / (da * db) - dot * ddb / (da * db**2))
        return ga, gb

    return make_result("cosine_similarity", data, (a, b), backward)
