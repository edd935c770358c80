"""Differentiable operators.

Every op takes :class:`Tensor` (or array-like) inputs, computes its forward
result with numpy and registers a vector-Jacobian product on the active tape.
"""

from __future__ import annotations

import math
from itertools import product
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from ..errors import DimensionError, GeometryError, ContractError
from .tensor import Tensor, apply_op, as_tensor


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    if grad.shape == tuple(shape):
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _pair(a, b):
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    return a, b


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return apply_op(
        "add", (a, b), a.data + b.data,
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return apply_op(
        "sub", (a, b), a.data - b.data,
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return apply_op(
        "mul", (a, b), a.data * b.data,
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data
    return apply_op(
        "div", (a, b), out,
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return apply_op("neg", (a,), -a.data, lambda g: (-g,))


def relu(x) -> Tensor:
    """max(x, 0); the subgradient at exactly 0 is taken as 0."""
    x = as_tensor(x)
    mask = x.data > 0
    return apply_op("relu", (x,), np.where(mask, x.data, 0).astype(x.dtype), lambda g: (g * mask,))


def gelu(x) -> Tensor:
    """Exact (erf-based) GELU."""
    x = as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data / math.sqrt(2.0)))
    out = (x.data * cdf).astype(x.dtype)

    def vjp(g):
        pdf = np.exp(-0.5 * x.data * x.data) / math.sqrt(2.0 * math.pi)
        return ((g * (cdf + x.data * pdf)).astype(x.dtype),)

    return apply_op("gelu", (x,), out, vjp)


# ---------------------------------------------------------------- shape


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    orig = x.shape
    return apply_op("reshape", (x,), x.data.reshape(shape), lambda g: (g.reshape(orig),))


def transpose(x, axes: Optional[Sequence[int]] = None) -> Tensor:
    x = as_tensor(x)
    if not axes:
        axes = tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(axes))
    return apply_op(
        "transpose", (x,), np.ascontiguousarray(x.data.transpose(axes)),
        lambda g: (np.ascontiguousarray(g.transpose(inverse)),),
    )


def pad(x, pad_width) -> Tensor:
    """Zero padding; ``pad_width`` follows ``np.pad``."""
    x = as_tensor(x)
    pad_width = [tuple(p) for p in pad_width]
    index = tuple(slice(lo, lo + n) for (lo, _), n in zip(pad_width, x.shape))
    return apply_op("pad", (x,), np.pad(x.data, pad_width), lambda g: (g[index],))


def take(table, indices) -> Tensor:
    """Row gather ``table[indices]`` along axis 0 (embedding lookup)."""
    table = as_tensor(table)
    indices = np.asarray(indices, dtype=np.intp)

    def vjp(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, indices, g)
        return (gt,)

    return apply_op("take", (table,), table.data[indices], vjp)


# ---------------------------------------------------------------- reductions


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def sum(x, axis=None, keepdims=False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    out = np.sum(x.data, axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return apply_op("sum", (x,), np.asarray(out, dtype=x.dtype), vjp)


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return mul(sum(x, axes, keepdims), np.asarray(1.0 / count, dtype=x.dtype))


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes, broadcasting leading axes."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return apply_op("matmul", (a, b), out, vjp)


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` laid out (in, out)."""
    y = matmul(x, weight)
    return add(y, bias) if bias is not None else y


def einsum(subscripts: str, a, b) -> Tensor:
    """Two-operand einsum with explicit output, e.g. ``"bhtc,tkc->bhtk"``."""
    a, b = _pair(a, b)
    lhs, out_sub = subscripts.replace(" ", "").split("->")
    sa, sb = lhs.split(",")
    for own, other in ((sa, sb), (sb, sa)):
        if len(set(own)) != len(own):
            raise ContractError(f"repeated index in operand {own!r} is not supported")
        missing = set(own) - set(other) - set(out_sub)
        if missing:
            raise ContractError(f"index {sorted(missing)} of {own!r} is summed without a partner")
    out = np.einsum(f"{sa},{sb}->{out_sub}", a.data, b.data, optimize=True)

    def vjp(g):
        ga = np.einsum(f"{out_sub},{sb}->{sa}", g, b.data, optimize=True)
        gb = np.einsum(f"{out_sub},{sa}->{sb}", g, a.data, optimize=True)
        return ga, gb

    return apply_op("einsum", (a, b), out, vjp)


# ---------------------------------------------------------------- normalisation


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return apply_op("softmax", (x,), y, vjp)


def layernorm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis with the biased (1/D) variance."""
    if eps <= 0:
        raise ContractError("layernorm eps must be positive")
    x = as_tensor(x)
    gamma = as_tensor(gamma, x)
    beta = as_tensor(beta, x)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layernorm affine params must have shape ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = centered * rstd
    out = xhat * gamma.data + beta.data

    def vjp(g):
        lead = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=lead)
        dbeta = g.sum(axis=lead)
        dy = g * gamma.data
        dx = rstd * (dy - dy.mean(axis=-1, keepdims=True) - xhat * (dy * xhat).mean(axis=-1, keepdims=True))
        return dx, dgamma, dbeta

    return apply_op("layernorm", (x, gamma, beta), out, vjp)


# ---------------------------------------------------------------- 3-D conv / pool


def _triple(v, name):
    if isinstance(v, int):
        v = (v, v, v)
    v = tuple(int(i) for i in v)
    if len(v) != 3:
        raise ContractError(f"{name} must have three components")
    return v


def conv_output_shape(extents, kernel, stride, padding):
    out = []
    for x, k, s, p in zip(extents, kernel, stride, padding):
        if s < 1:
            raise GeometryError(f"stride components must be >= 1, got {stride}")
        if k > x + 2 * p:
            raise GeometryError(f"kernel {kernel} exceeds padded input {tuple(extents)} (padding {padding})")
        n = (x + 2 * p - k) // s + 1
        if n < 1:
            raise GeometryError(f"non-positive output extent for input {tuple(extents)}")
        out.append(n)
    return tuple(out)


def _windows(xp, kernel, stride, out_shape):
    st, sh, sw = stride
    to, ho, wo = out_shape
    win = sliding_window_view(xp, kernel, axis=(2, 3, 4))
    return win[:, :, : (to - 1) * st + 1 : st, : (ho - 1) * sh + 1 : sh, : (wo - 1) * sw + 1 : sw]


def conv3d(x, weight, bias=None, stride=1, padding=0) -> Tensor:
    """3-D cross-correlation over (B, C, T, H, W) with zero padding."""
    x = as_tensor(x)
    weight = as_tensor(weight, x)
    if x.ndim != 5 or weight.ndim != 5:
        raise DimensionError(f"conv3d expects rank-5 input and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise DimensionError(f"input has {x.shape[1]} channels but weight expects {weight.shape[1]}")
    stride = _triple(stride, "stride")
    padding = _triple(padding, "padding")
    kernel = weight.shape[2:]
    out_shape = conv_output_shape(x.shape[2:], kernel, stride, padding)
    pt, ph, pw = padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (pt, pt), (ph, ph), (pw, pw))) if any(padding) else x.data
    win = _windows(xp, kernel, stride, out_shape)
    # (B, To, Ho, Wo, O) -> (B, O, To, Ho, Wo)
    out = np.tensordot(win, weight.data, axes=([1, 5, 6, 7], [1, 2, 3, 4]))
    out = np.ascontiguousarray(out.transpose(0, 4, 1, 2, 3))
    inputs = [x, weight]
    if bias is not None:
        bias = as_tensor(bias, x)
        if bias.shape != (weight.shape[0],):
            raise DimensionError(f"bias must have shape ({weight.shape[0]},), got {bias.shape}")
        out += bias.data.reshape(1, -1, 1, 1, 1)
        inputs.append(bias)

    def vjp(g):
        gw = np.tensordot(g, win, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
        cols = np.tensordot(weight.data, g, axes=([0], [1]))  # (C, kt, kh, kw, B, To, Ho, Wo)
        gxp = np.zeros(xp.shape, dtype=x.dtype)
        st, sh, sw = stride
        to, ho, wo = out_shape
        for a, b, c in product(*(range(k) for k in kernel)):
            gxp[:, :, a : a + st * to : st, b : b + sh * ho : sh, c : c + sw * wo : sw] += (
                cols[:, a, b, c].transpose(1, 0, 2, 3, 4)
            )
        gx = gxp[:, :, pt : pt + x.shape[2], ph : ph + x.shape[3], pw : pw + x.shape[4]]
        grads = [np.ascontiguousarray(gx), gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3, 4)))
        return grads

    return apply_op("conv3d", inputs, out, vjp)


def maxpool3d(x, window=2, stride=None, return_indices: bool = False):
    """Max over 3-D windows (no padding).

    Ties resolve to the lowest linear index inside the window, which is also
    the element that receives the gradient. With ``return_indices`` the flat
    input index (over T*H*W) of every max is returned alongside the output.
    """
    x = as_tensor(x)
    if x.ndim != 5:
        raise DimensionError(f"maxpool3d expects rank-5 input, got {x.shape}")
    window = _triple(window, "window")
    stride = _triple(stride if stride is not None else window, "stride")
    out_shape = conv_output_shape(x.shape[2:], window, stride, (0, 0, 0))
    win = _windows(x.data, window, stride, out_shape)
    flat = win.reshape(win.shape[:5] + (-1,))
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    kt, kh, kw = window
    at, ah, aw = np.unravel_index(arg, window)
    to, ho, wo = out_shape
    T, H, W = x.shape[2:]
    t_idx = np.arange(to).reshape(-1, 1, 1) * stride[0] + at
    h_idx = np.arange(ho).reshape(1, -1, 1) * stride[1] + ah
    w_idx = np.arange(wo).reshape(1, 1, -1) * stride[2] + aw
    lin = (t_idx * H + h_idx) * W + w_idx
    overlapping = any(s < k for s, k in zip(stride, window))

    def vjp(g):
        B, C = x.shape[:2]
        gx = np.zeros((B, C, T * H * W), dtype=x.dtype)
        bi = np.arange(B).reshape(-1, 1, 1, 1, 1)
        ci = np.arange(C).reshape(1, -1, 1, 1, 1)
        if overlapping:
            np.add.at(gx, (bi, ci, lin), g)
        else:
            gx[bi, ci, lin] = g
        return (gx.reshape(x.shape),)

    result = apply_op("maxpool3d", (x,), np.ascontiguousarray(out), vjp)
    if return_indices:
        return result, lin
    return result


def grid_pool(tokens, grid, stride, weight=None):
    """Non-overlapping pooling over a flattened (T, H, W) token grid.

    ``tokens`` is (..., T*H*W, C). Windows have extent equal to ``stride``;
    trailing partial windows are kept, giving ceil(X / s) outputs per axis.
    Without ``weight`` this is an average over the valid (unpadded) elements.
    With ``weight`` of shape (C, st, sh, sw) it is a depthwise convolution
    whose kernel equals its stride.
    """
    tokens = as_tensor(tokens)
    T, H, W = grid
    st, sh, sw = _triple(stride, "stride")
    if tokens.shape[-2] != T * H * W:
        raise GeometryError(f"token count {tokens.shape[-2]} does not match grid {tuple(grid)}")
    if (st, sh, sw) == (1, 1, 1) and weight is None:
        return tokens, (T, H, W)
    lead = tokens.shape[:-2]
    C = tokens.shape[-1]
    new = (-(-T // st), -(-H // sh), -(-W // sw))
    x = reshape(tokens, (-1, T, H, W, C))
    pads = (new[0] * st - T, new[1] * sh - H, new[2] * sw - W)
    if any(pads):
        x = pad(x, ((0, 0), (0, pads[0]), (0, pads[1]), (0, pads[2]), (0, 0)))
    x = reshape(x, (-1, new[0], st, new[1], sh, new[2], sw, C))
    if weight is None:
        ones = np.pad(np.ones((T, H, W)), ((0, pads[0]), (0, pads[1]), (0, pads[2])))
        counts = ones.reshape(new[0], st, new[1], sh, new[2], sw).sum(axis=(1, 3, 5))
        x = sum(x, axis=(2, 4, 6))
        x = mul(x, (1.0 / counts)[..., None].astype(tokens.dtype))
    else:
        weight = as_tensor(weight, tokens)
        if weight.shape != (C, st, sh, sw):
            raise DimensionError(f"pool weight must have shape {(C, st, sh, sw)}, got {weight.shape}")
        kern = transpose(weight, (1, 2, 3, 0))  # (st, sh, sw, C)
        kern = reshape(kern, (1, 1, st, 1, sh, 1, sw, C))
        x = sum(mul(x, kern), axis=(2, 4, 6))
    out = reshape(x, lead + (new[0] * new[1] * new[2], C))
    return out, new


def sigmoid(z):
    """Numerically stable logistic function on plain arrays."""
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out
