"""Differentiable primitives.

Shapes are explicit: binary ops between two tensors require identical shapes.
The only implicit broadcast is a bias over the last axis (``add_bias``,
``linear``) or over the channel axis (``conv2d``). Non-tensor operands
(python scalars, numpy arrays) are constants and may broadcast into the tensor
operand's shape, since they never receive a gradient.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .tensor import DimensionError, Tensor


def _const(c, like: Tensor) -> np.ndarray:
    arr = np.asarray(c, dtype=like.dtype)
    try:
        np.broadcast_shapes(arr.shape, like.shape)
    except ValueError as exc:
        raise DimensionError(f"constant of shape {arr.shape} does not broadcast to {like.shape}") from exc
    if np.broadcast_shapes(arr.shape, like.shape) != like.shape:
        raise DimensionError(f"constant of shape {arr.shape} would enlarge tensor of shape {like.shape}")
    return arr


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise DimensionError(f"axis {axis} out of range for {ndim}-d tensor")
    return axis % ndim


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = _const(b, a)
        return Tensor.from_op(a.data + c, (a,), lambda g: (g,), "add_const")
    _same_shape(a, b, "add")
    return Tensor.from_op(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = _const(b, a)
        return Tensor.from_op(a.data - c, (a,), lambda g: (g,), "sub_const")
    _same_shape(a, b, "sub")
    return Tensor.from_op(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return scale(a, b)
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return Tensor.from_op(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a: Tensor, c) -> Tensor:
    """Multiply by a constant (scalar or array broadcastable into ``a``)."""
    c = _const(c, a)
    return Tensor.from_op(a.data * c, (a,), lambda g: (np.broadcast_to(g * c, a.shape).copy(),), "scale")


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    if b.ndim != 1 or b.shape[0] != x.shape[-1]:
        raise DimensionError(f"add_bias: bias {b.shape} does not match last axis of {x.shape}")
    red = tuple(range(x.ndim - 1))
    return Tensor.from_op(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=red)), "add_bias")


def square(x: Tensor) -> Tensor:
    xd = x.data
    return Tensor.from_op(xd * xd, (x,), lambda g: (2.0 * g * xd,), "square")


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return Tensor.from_op(y, (x,), lambda g: (g * y,), "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data
    return Tensor.from_op(np.log(xd), (x,), lambda g: (g / xd,), "log")


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)
    return Tensor.from_op(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return Tensor.from_op(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor.from_op(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def silu(x: Tensor) -> Tensor:
    xd = x.data
    s = _sigmoid(xd)

    def backward(g):
        return (g * (s * (1.0 + xd * (1.0 - s))),)

    return Tensor.from_op(xd * s, (x,), backward, "silu")


def gelu(x: Tensor) -> Tensor:
    """tanh approximation of GELU."""
    xd = x.data
    k = math.sqrt(2.0 / math.pi)
    inner = k * (xd + 0.044715 * xd**3)
    th = np.tanh(inner)
    y = 0.5 * xd * (1.0 + th)

    def backward(g):
        dinner = k * (1.0 + 3 * 0.044715 * xd * xd)
        return (g * (0.5 * (1.0 + th) + 0.5 * xd * (1.0 - th * th) * dinner),)

    return Tensor.from_op(y.astype(x.dtype), (x,), backward, "gelu")


def softplus(x: Tensor) -> Tensor:
    xd = x.data
    y = np.logaddexp(0.0, xd).astype(x.dtype)
    return Tensor.from_op(y, (x,), lambda g: (g * _sigmoid(xd),), "softplus")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    y = x.data.reshape(shape)
    src = x.shape
    return Tensor.from_op(y, (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return Tensor.from_op(np.ascontiguousarray(x.data.transpose(axes)), (x,), lambda g: (g.transpose(inv),), "transpose")


def broadcast_to(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicit broadcast; ``x`` must have the target rank with unit dims where it expands."""
    shape = tuple(shape)
    if x.ndim != len(shape) or any(a != b and a != 1 for a, b in zip(x.shape, shape)):
        raise DimensionError(f"broadcast_to: cannot expand {x.shape} to {shape}")
    red = tuple(i for i, (a, b) in enumerate(zip(x.shape, shape)) if a != b)
    y = np.broadcast_to(x.data, shape).copy()
    return Tensor.from_op(y, (x,), lambda g: (g.sum(axis=red, keepdims=True),), "broadcast_to")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not tensors:
        raise DimensionError("concat of empty list")
    ax = _axis(axis, tensors[0].ndim)
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
            a != b for i, (a, b) in enumerate(zip(t.shape, tensors[0].shape)) if i != ax
        ):
            raise DimensionError(f"concat: incompatible shapes {tensors[0].shape} and {t.shape}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(tensors)))

    return Tensor.from_op(np.concatenate([t.data for t in tensors], axis=ax), tensors, backward, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    expanded = []
    for t in tensors:
        shape = list(t.shape)
        ax = axis if axis >= 0 else t.ndim + 1 + axis
        shape.insert(ax, 1)
        expanded.append(reshape(t, shape))
    return concat(expanded, axis=axis)


def index(x: Tensor, key) -> Tensor:
    """Basic (slice/int) indexing; the gradient scatters back into a zero array."""
    y = x.data[key]

    def backward(g):
        out = np.zeros_like(x.data)
        out[key] = g
        return (out,)

    return Tensor.from_op(np.ascontiguousarray(y), (x,), backward, "index")


def roll(x: Tensor, shift, axis) -> Tensor:
    shift_t = tuple(shift) if isinstance(shift, (tuple, list)) else (shift,)
    axis_t = tuple(axis) if isinstance(axis, (tuple, list)) else (axis,)
    neg = tuple(-s for s in shift_t)
    return Tensor.from_op(np.roll(x.data, shift_t, axis_t), (x,), lambda g: (np.roll(g, neg, axis_t),), "roll")


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    y = np.sum(x.data, axis=axis, keepdims=keepdims)
    src = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return Tensor.from_op(np.asarray(y, dtype=x.dtype), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([x.shape[a] for a in axes]))
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def cumsum(x: Tensor, axis: int = -1, exclusive: bool = False) -> Tensor:
    """Running sum along ``axis``; ``exclusive`` shifts it so element j sums indices < j."""
    ax = _axis(axis, x.ndim)
    y = np.cumsum(x.data, axis=ax)
    if exclusive:
        y = y - x.data

    def backward(g):
        rev = np.flip(np.cumsum(np.flip(g, axis=ax), axis=ax), axis=ax)
        if exclusive:
            rev = rev - g
        return (rev,)

    return Tensor.from_op(y, (x,), backward, "cumsum")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a[..., n, k] @ b[..., k, m]`` with identical batch dims, or ``b`` 2-D shared across the batch."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dimensions disagree {a.shape} @ {b.shape}")
    if b.ndim != 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch dims disagree {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return Tensor.from_op(ad @ bd, (a, b), backward, "matmul")


def linear(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """``x W + b`` over the last axis of ``x``."""
    if W.ndim != 2 or x.shape[-1] != W.shape[0]:
        raise DimensionError(f"linear: input {x.shape} incompatible with weight {W.shape}")
    y = matmul(x, W)
    return y if b is None else add_bias(y, b)


def contract(x: Tensor, A: np.ndarray, axis: int) -> Tensor:
    """Apply a constant matrix along one axis: ``y[..i..] = sum_j A[i, j] x[..j..]``."""
    ax = _axis(axis, x.ndim)
    A = np.asarray(A, dtype=x.dtype)
    if A.ndim != 2 or A.shape[1] != x.shape[ax]:
        raise DimensionError(f"contract: matrix {A.shape} vs axis {ax} of {x.shape}")
    y = np.moveaxis(np.tensordot(A, x.data, axes=(1, ax)), 0, ax)

    def backward(g):
        return (np.moveaxis(np.tensordot(A.T, g, axes=(1, ax)), 0, ax),)

    return Tensor.from_op(np.ascontiguousarray(y), (x,), backward, "contract")


def sparse_matmul(M, x: Tensor) -> Tensor:
    """Constant sparse (or dense) matrix ``M[P, N]`` times ``x[N, F]``."""
    if x.ndim != 2 or M.shape[1] != x.shape[0]:
        raise DimensionError(f"sparse_matmul: {M.shape} @ {x.shape}")
    MT = M.T
    y = np.asarray(M @ x.data, dtype=x.dtype)
    return Tensor.from_op(y, (x,), lambda g: (np.asarray(MT @ g, dtype=x.dtype),), "sparse_matmul")


# ---------------------------------------------------------------------------
# normalisation / attention
# ---------------------------------------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    ax = _axis(axis, x.ndim)
    shifted = x.data - x.data.max(axis=ax, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=ax, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=ax, keepdims=True)),)

    return Tensor.from_op(y, (x,), backward, "softmax")


def attention(Q: Tensor, K: Tensor, V: Tensor) -> Tensor:
    """Scaled dot-product attention ``softmax(Q K^T / sqrt(D)) V`` over the last two axes."""
    if Q.shape[-1] != K.shape[-1] or K.shape[-2] != V.shape[-2] or Q.shape[:-2] != K.shape[:-2]:
        raise DimensionError(f"attention: Q {Q.shape}, K {K.shape}, V {V.shape}")
    perm = tuple(range(K.ndim - 2)) + (K.ndim - 1, K.ndim - 2)
    scores = scale(matmul(Q, transpose(K, perm)), 1.0 / math.sqrt(Q.shape[-1]))
    return matmul(softmax(scores, axis=-1), V)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, axis: int = -1, eps: float = 1e-5) -> Tensor:
    ax = _axis(axis, x.ndim)
    n = x.shape[ax]
    if gain.shape != (n,) or bias.shape != (n,):
        raise DimensionError(f"layer_norm: gain/bias must have shape ({n},)")
    bshape = [1] * x.ndim
    bshape[ax] = n
    gd = gain.data.reshape(bshape)
    mu = x.data.mean(axis=ax, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=ax, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gd + bias.data.reshape(bshape)
    red = tuple(i for i in range(x.ndim) if i != ax)

    def backward(g):
        gx_hat = g * gd
        gx = inv * (
            gx_hat - gx_hat.mean(axis=ax, keepdims=True) - xhat * (gx_hat * xhat).mean(axis=ax, keepdims=True)
        )
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return Tensor.from_op(y.astype(x.dtype), (x, gain, bias), backward, "layer_norm")


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def conv2d(x: Tensor, k: Tensor, b: Tensor | None = None, stride: int = 1, pad: int | None = None) -> Tensor:
    """Cross-correlation of ``x[B, C, H, W]`` with ``k[Cout, C, kh, kw]``.

    ``pad`` defaults to ``kh // 2`` ("same" output size at stride 1).
    """
    if x.ndim != 4 or k.ndim != 4:
        raise DimensionError(f"conv2d expects 4-d input and kernel, got {x.shape}, {k.shape}")
    B, C, H, W = x.shape
    Cout, Ck, kh, kw = k.shape
    if Ck != C:
        raise DimensionError(f"conv2d: input has {C} channels, kernel expects {Ck}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise DimensionError("conv2d: kernel sizes must be odd")
    if b is not None and b.shape != (Cout,):
        raise DimensionError(f"conv2d: bias must have shape ({Cout},)")
    if pad is None:
        pad = kh // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : (Ho - 1) * stride + 1 : stride, : (Wo - 1) * stride + 1 : stride]
    # cols: [B, Ho, Wo, C*kh*kw]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B, Ho, Wo, C * kh * kw)
    kmat = k.data.reshape(Cout, C * kh * kw)
    y = cols @ kmat.T
    if b is not None:
        y = y + b.data
    y = np.ascontiguousarray(y.transpose(0, 3, 1, 2))
    parents = (x, k) if b is None else (x, k, b)

    def backward(g):
        gt = g.transpose(0, 2, 3, 1)  # [B, Ho, Wo, Cout]
        gk = (gt.reshape(-1, Cout).T @ cols.reshape(-1, C * kh * kw)).reshape(k.shape)
        gcols = (gt @ kmat).reshape(B, Ho, Wo, C, kh, kw)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + (Ho - 1) * stride + 1 : stride, j : j + (Wo - 1) * stride + 1 : stride] += (
                    gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                )
        gx = gxp[:, :, pad : pad + H, pad : pad + W] if pad else gxp
        out = [np.ascontiguousarray(gx), gk]
        if b is not None:
            out.append(g.sum(axis=(0, 2, 3)))
        return tuple(out)

    return Tensor.from_op(y, parents, backward, "conv2d")


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def sum_squared_error(pred: Tensor, target) -> Tensor:
    diff = sub(pred, target) if isinstance(target, Tensor) else sub(pred, np.asarray(target))
    return sum(square(diff))


def mse(pred: Tensor, target) -> Tensor:
    return scale(sum_squared_error(pred, target), 1.0 / pred.size)
