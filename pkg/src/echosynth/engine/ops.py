"""Differentiable operations on :class:`Tensor`.

Each op computes its value with numpy (float32) and records a closure that maps
the output gradient to one gradient per operand.
"""

from __future__ import annotations

import numpy as np

from . import kernels
from .tensor import Tensor, as_tensor, make_result

F32 = np.float32


def _triple(v) -> tuple[int, int, int]:
    if np.isscalar(v):
        return (int(v),) * 3
    t = tuple(int(x) for x in v)
    if len(t) != 3:
        raise ValueError(f"expected 3 values, got {v!r}")
    return t


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_result(a.data + b.data, (a, b),
                       lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_result(a.data - b.data, (a, b),
                       lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_result(a.data * b.data, (a, b),
                       lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def backward(g):
        return (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape))

    return make_result(out, (a, b), backward)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return make_result(-a.data, (a,), lambda g: (-g,))


def square(a: Tensor) -> Tensor:
    return make_result(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def abs(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    return make_result(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_result(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return make_result(np.log(a.data), (a,), lambda g: (g / a.data,))


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.sum(a.data, axis=axis, keepdims=keepdims, dtype=F32)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return make_result(np.asarray(out), (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(sum(a, axis=axis, keepdims=keepdims), F32(1.0 / count))


def reshape(a: Tensor, shape) -> Tensor:
    return make_result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors, axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(tensors)))

    return make_result(out, tensors, backward)


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_result(np.where(mask, x.data, F32(0)), (x,), lambda g: (g * mask,))


def leaky_relu(x: Tensor, alpha: float = 0.2) -> Tensor:
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"leaky_relu slope must lie in (0, 1), got {alpha}")
    slope = np.where(x.data > 0, F32(1.0), F32(alpha))
    return make_result(x.data * slope, (x,), lambda g: (g * slope,))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return make_result(out, (x,), lambda g: (g * (1.0 - out * out),))


def sigmoid(x: Tensor) -> Tensor:
    out = (0.5 * (np.tanh(0.5 * x.data) + 1.0)).astype(F32)
    return make_result(out, (x,), lambda g: (g * out * (1.0 - out),))


def activation(x: Tensor, kind: str, alpha: float = 0.2) -> Tensor:
    """Dispatch a pointwise nonlinearity by name."""
    if kind == "relu":
        return relu(x)
    if kind == "leaky_relu":
        return leaky_relu(x, alpha)
    if kind == "tanh":
        return tanh(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


def log_softmax(x: Tensor, axis: int = 1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def backward(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return make_result(out, (x,), backward)


def softmax(x: Tensor, axis: int = 1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result(out, (x,), backward)


def bce_with_logits(logits: Tensor, target: float | np.ndarray) -> Tensor:
    """Mean binary cross-entropy of ``sigmoid(logits)`` against a constant target."""
    z = logits.data
    y = np.broadcast_to(np.asarray(target, dtype=F32), z.shape)
    per = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    n = z.size
    sig = (0.5 * (np.tanh(0.5 * z) + 1.0)).astype(F32)

    def backward(g):
        return (g * (sig - y) / F32(n),)

    return make_result(np.asarray(per.mean(dtype=F32)), (logits,), backward)


# ---------------------------------------------------------------------------
# 3D convolution family
# ---------------------------------------------------------------------------


def conv_output_extent(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def conv_transpose_output_extent(n: int, k: int, stride: int, pad: int) -> int:
    return (n - 1) * stride - 2 * pad + k


def _pad_spatial(a: np.ndarray, p) -> np.ndarray:
    if not any(p):
        return a
    return np.pad(a, ((0, 0), (0, 0), (p[0], p[0]), (p[1], p[1]), (p[2], p[2])))


def _crop_spatial(a: np.ndarray, p) -> np.ndarray:
    if not any(p):
        return a
    d, h, w = a.shape[2:]
    return a[:, :, p[0] : d - p[0], p[1] : h - p[1], p[2] : w - p[2]]


def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """Cross-correlation of ``x[N,Cin,D,H,W]`` with ``weight[Cout,Cin,kd,kh,kw]``."""
    s, p = _triple(stride), _triple(padding)
    if x.ndim != 5 or weight.ndim != 5:
        raise ValueError(f"conv3d expects 5-D input and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ValueError(f"conv3d channel mismatch: input has {x.shape[1]}, weight expects {weight.shape[1]}")
    if min(s) < 1 or min(p) < 0:
        raise ValueError(f"invalid stride {s} or padding {p}")
    for i in range(3):
        if x.shape[2 + i] + 2 * p[i] < weight.shape[2 + i]:
            raise ValueError(f"kernel extent {weight.shape[2 + i]} exceeds padded input on axis {i}")
    xp = _pad_spatial(x.data, p)
    y = kernels.conv3d_forward(xp, weight.data, s)
    if bias is not None:
        y += bias.data[None, :, None, None, None]

    def backward(g):
        gx = gw = gb = None
        if x.requires_grad:
            gx = _crop_spatial(kernels.conv3d_backward_input(g, weight.data, s, xp.shape), p)
        if weight.requires_grad:
            gw = kernels.conv3d_backward_weight(xp, g, s, weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3, 4))
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return make_result(y, parents, backward)


def conv_transpose3d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """Adjoint of :func:`conv3d`; ``weight`` is laid out ``[Cin,Cout,kd,kh,kw]``."""
    s, p = _triple(stride), _triple(padding)
    if x.ndim != 5 or weight.ndim != 5:
        raise ValueError(f"conv_transpose3d expects 5-D input and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[0]:
        raise ValueError(f"conv_transpose3d channel mismatch: input has {x.shape[1]}, weight expects {weight.shape[0]}")
    if min(s) < 1 or min(p) < 0:
        raise ValueError(f"invalid stride {s} or padding {p}")
    k = weight.shape[2:]
    full = [(x.shape[2 + i] - 1) * s[i] + k[i] for i in range(3)]
    out_ext = [full[i] - 2 * p[i] for i in range(3)]
    if min(out_ext) <= 0:
        raise ValueError(f"conv_transpose3d output extent would be {out_ext}")
    n = x.shape[0]
    yfull = kernels.conv3d_backward_input(x.data, weight.data, s, (n, weight.shape[1], *full))
    y = np.ascontiguousarray(_crop_spatial(yfull, p))
    if bias is not None:
        y += bias.data[None, :, None, None, None]

    def backward(g):
        gx = gw = gb = None
        gfull = _pad_spatial(g, p)
        if x.requires_grad:
            gx = kernels.conv3d_forward(gfull, weight.data, s)
        if weight.requires_grad:
            gw = kernels.conv3d_backward_weight(gfull, x.data, s, weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3, 4))
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return make_result(y, parents, backward)


def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Align-corners linear interpolation matrix of shape (n_out, n_in)."""
    m = np.zeros((n_out, n_in), dtype=np.float64)
    if n_in == 1 or n_out == 1:
        m[:, 0] = 1.0
        return m.astype(F32)
    src = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    i0 = np.minimum(np.floor(src).astype(int), n_in - 2)
    frac = src - i0
    rows = np.arange(n_out)
    m[rows, i0] += 1.0 - frac
    m[rows, i0 + 1] += frac
    return m.astype(F32)


def _apply_axes(a: np.ndarray, mats) -> np.ndarray:
    for ax, m in zip((2, 3, 4), mats):
        a = np.moveaxis(np.tensordot(a, m, axes=([ax], [1])), -1, ax)
    return np.ascontiguousarray(a)


def trilinear_upsample(x: Tensor, factor: int = 2) -> Tensor:
    """Multiply each spatial extent by ``factor`` with align-corners linear interpolation."""
    factor = int(factor)
    if factor < 1:
        raise ValueError(f"upsampling factor must be >= 1, got {factor}")
    if x.ndim != 5:
        raise ValueError(f"trilinear_upsample expects [N,C,D,H,W], got {x.shape}")
    mats = [_interp_matrix(n, n * factor) for n in x.shape[2:]]
    y = _apply_axes(x.data, mats)
    return make_result(y, (x,), lambda g: (_apply_axes(g, [m.T for m in mats]),))


def instance_norm3d(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-(sample, channel) normalisation over D,H,W followed by an affine map."""
    if eps <= 0:
        raise ValueError(f"instance_norm3d needs eps > 0, got {eps}")
    if x.ndim != 5:
        raise ValueError(f"instance_norm3d expects [N,C,D,H,W], got {x.shape}")
    m = int(np.prod(x.shape[2:]))
    if m < 2:
        raise ValueError("instance_norm3d needs at least 2 spatial voxels per channel")
    axes = (2, 3, 4)
    mu = x.data.mean(axis=axes, keepdims=True, dtype=F32)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axes, keepdims=True, dtype=F32)
    inv = (1.0 / np.sqrt(var + F32(eps))).astype(F32)
    xhat = xc * inv
    gm = gamma.data[None, :, None, None, None]
    y = xhat * gm + beta.data[None, :, None, None, None]

    def backward(g):
        gxhat = g * gm
        gx = inv * (gxhat - gxhat.mean(axis=axes, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=axes, keepdims=True))
        return gx, (g * xhat).sum(axis=(0, 2, 3, 4)), g.sum(axis=(0, 2, 3, 4))

    return make_result(y, (x, gamma, beta), backward)
