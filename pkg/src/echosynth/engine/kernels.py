"""Dense 3D correlation kernels used by the convolution ops.

Two interchangeable backends implement the same three primitives:

* ``conv3d_forward(xp, w, stride)``  -- strided cross-correlation of a padded input
* ``conv3d_backward_input(gy, w, stride, xp_shape)`` -- its adjoint (scatter-add)
* ``conv3d_backward_weight(xp, gy, stride, w_shape)`` -- weight gradient

The numba backend uses direct loops compiled with ``@njit``; the numpy backend
uses im2col + BLAS.  Each backend is deterministic on its own, but the two
differ in summation order and therefore are not bit-identical to each other.

Backend selection: ``ECHOSYNTH_KERNELS=numpy|numba`` at import time, or
:func:`set_backend` at runtime.  When numba is unavailable the numpy path is
used regardless of the flag.
"""

from __future__ import annotations

import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is an optional accelerator
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]):
            return args[0]
        return lambda f: f


BACKENDS = ("numpy", "numba")


def _out_extent(n_pad: int, k: int, s: int) -> int:
    return (n_pad - k) // s + 1


# ---------------------------------------------------------------------------
# numpy backend (im2col)
# ---------------------------------------------------------------------------


def _windows(xp, ksize, stride, out_shape):
    kd, kh, kw = ksize
    sd, sh, sw = stride
    do, ho, wo = out_shape
    win = sliding_window_view(xp, (kd, kh, kw), axis=(2, 3, 4))
    return win[:, :, : (do - 1) * sd + 1 : sd, : (ho - 1) * sh + 1 : sh, : (wo - 1) * sw + 1 : sw]


def _im2col(xp, ksize, stride, out_shape):
    """Patch matrix with rows (c, kd, kh, kw) and columns (n, d, h, w).

    The spatial output axes stay innermost so the gather copy walks memory in order.
    """
    c = xp.shape[1]
    win = _windows(xp, ksize, stride, out_shape)
    return win.transpose(1, 5, 6, 7, 0, 2, 3, 4).reshape(c * int(np.prod(ksize)), -1)


def _np_forward(xp, w, stride):
    n = xp.shape[0]
    o = w.shape[0]
    ksize = w.shape[2:]
    out_shape = tuple(_out_extent(xp.shape[2 + i], ksize[i], stride[i]) for i in range(3))
    y = w.reshape(o, -1) @ _im2col(xp, ksize, stride, out_shape)
    return np.ascontiguousarray(y.reshape((o, n) + out_shape).transpose(1, 0, 2, 3, 4))


def _np_backward_input(gy, w, stride, xp_shape):
    n, o = gy.shape[:2]
    c, kd, kh, kw = w.shape[1:]
    sd, sh, sw = stride
    do, ho, wo = gy.shape[2:]
    g2 = gy.transpose(1, 0, 2, 3, 4).reshape(o, -1)
    # taps outermost so every scatter below reads a contiguous block
    wt = w.transpose(2, 3, 4, 1, 0).reshape(-1, o)
    cols = (wt @ g2).reshape(kd, kh, kw, c, n, do, ho, wo)
    gx = np.zeros((c, n) + tuple(xp_shape[2:]), dtype=gy.dtype)
    for a in range(kd):
        for b in range(kh):
            for e in range(kw):
                gx[:, :, a : a + (do - 1) * sd + 1 : sd, b : b + (ho - 1) * sh + 1 : sh,
                   e : e + (wo - 1) * sw + 1 : sw] += cols[a, b, e]
    return np.ascontiguousarray(gx.transpose(1, 0, 2, 3, 4))


def _np_backward_weight(xp, gy, stride, w_shape):
    o = w_shape[0]
    cols = _im2col(xp, w_shape[2:], stride, gy.shape[2:])
    g2 = gy.transpose(1, 0, 2, 3, 4).reshape(o, -1)
    return (g2 @ cols.T).reshape(w_shape)


# ---------------------------------------------------------------------------
# numba backend (direct loops, fixed accumulation order)
# ---------------------------------------------------------------------------


@njit(cache=True)
def _nb_forward(xp, w, sd, sh, sw, out):
    n_, o_, do, ho, wo = out.shape
    c_, kd, kh, kw = w.shape[1], w.shape[2], w.shape[3], w.shape[4]
    for n in range(n_):
        for o in range(o_):
            for c in range(c_):
                for a in range(kd):
                    for b in range(kh):
                        for e in range(kw):
                            wv = w[o, c, a, b, e]
                            for i in range(do):
                                for j in range(ho):
                                    for k in range(wo):
                                        out[n, o, i, j, k] += wv * xp[n, c, i * sd + a, j * sh + b, k * sw + e]
    return out


@njit(cache=True)
def _nb_backward_input(gy, w, sd, sh, sw, gx):
    n_, o_, do, ho, wo = gy.shape
    c_, kd, kh, kw = w.shape[1], w.shape[2], w.shape[3], w.shape[4]
    for n in range(n_):
        for o in range(o_):
            for c in range(c_):
                for a in range(kd):
                    for b in range(kh):
                        for e in range(kw):
                            wv = w[o, c, a, b, e]
                            for i in range(do):
                                for j in range(ho):
                                    for k in range(wo):
                                        gx[n, c, i * sd + a, j * sh + b, k * sw + e] += wv * gy[n, o, i, j, k]
    return gx


@njit(cache=True)
def _nb_backward_weight(xp, gy, sd, sh, sw, gw):
    n_, o_, do, ho, wo = gy.shape
    c_, kd, kh, kw = gw.shape[1], gw.shape[2], gw.shape[3], gw.shape[4]
    for o in range(o_):
        for c in range(c_):
            for a in range(kd):
                for b in range(kh):
                    for e in range(kw):
                        acc = np.float32(0.0)
                        for n in range(n_):
                            for i in range(do):
                                for j in range(ho):
                                    for k in range(wo):
                                        acc += gy[n, o, i, j, k] * xp[n, c, i * sd + a, j * sh + b, k * sw + e]
                        gw[o, c, a, b, e] = acc
    return gw


def _nb_forward_entry(xp, w, stride):
    n = xp.shape[0]
    o = w.shape[0]
    out_shape = tuple(_out_extent(xp.shape[2 + i], w.shape[2 + i], stride[i]) for i in range(3))
    out = np.zeros((n, o) + out_shape, dtype=np.float32)
    return _nb_forward(xp, w, stride[0], stride[1], stride[2], out)


def _nb_backward_input_entry(gy, w, stride, xp_shape):
    gx = np.zeros(xp_shape, dtype=np.float32)
    return _nb_backward_input(np.ascontiguousarray(gy), w, stride[0], stride[1], stride[2], gx)


def _nb_backward_weight_entry(xp, gy, stride, w_shape):
    gw = np.zeros(w_shape, dtype=np.float32)
    return _nb_backward_weight(xp, np.ascontiguousarray(gy), stride[0], stride[1], stride[2], gw)


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------

_IMPL = {
    "numpy": (_np_forward, _np_backward_input, _np_backward_weight),
    "numba": (_nb_forward_entry, _nb_backward_input_entry, _nb_backward_weight_entry),
}


def _default_backend() -> str:
    requested = os.environ.get("ECHOSYNTH_KERNELS", "numpy").strip().lower()
    if requested not in BACKENDS:
        raise ValueError(f"ECHOSYNTH_KERNELS must be one of {BACKENDS}, got {requested!r}")
    if requested == "numba" and not HAVE_NUMBA:
        return "numpy"
    return requested


_backend = _default_backend()


def get_backend() -> str:
    return _backend


def set_backend(name: str) -> str:
    """Switch kernel backend; returns the previous one."""
    global _backend
    if name not in BACKENDS:
        raise ValueError(f"unknown backend {name!r}; expected one of {BACKENDS}")
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba backend requested but numba is not installed")
    prev, _backend = _backend, name
    return prev


def conv3d_forward(xp: np.ndarray, w: np.ndarray, stride) -> np.ndarray:
    return _IMPL[_backend][0](xp, w, tuple(stride))


def conv3d_backward_input(gy: np.ndarray, w: np.ndarray, stride, xp_shape) -> np.ndarray:
    return _IMPL[_backend][1](gy, w, tuple(stride), tuple(xp_shape))


def conv3d_backward_weight(xp: np.ndarray, gy: np.ndarray, stride, w_shape) -> np.ndarray:
    return _IMPL[_backend][2](xp, gy, tuple(stride), tuple(w_shape))
