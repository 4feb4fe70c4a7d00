"""Central finite-difference oracle, independent of the tape machinery.

The scalar probed is ``sum(weights * f(inputs))`` accumulated in float64, so a
perturbation of one input only changes the outputs it actually touches.
"""

from __future__ import annotations

import numpy as np

from echosynth.engine import Tape, Tensor, ops


def analytic_grads(fn, arrays, weights):
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = fn(*tensors)
        loss = ops.sum(ops.mul(out, Tensor(weights)))
    tape.backward(loss)
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]


def numeric_grads(fn, arrays, weights, h=1e-3, which=None):
    arrays = [np.array(a, dtype=np.float32) for a in arrays]
    w64 = np.asarray(weights, dtype=np.float64)

    def probe():
        out = fn(*[Tensor(a) for a in arrays]).data.astype(np.float64)
        return float(np.sum(out * w64))

    grads = []
    for ai, a in enumerate(arrays):
        g = np.zeros(a.shape, dtype=np.float64)
        if which is not None and ai not in which:
            grads.append(g)
            continue
        flat = a.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + np.float32(h)
            xp, fp = float(flat[i]), probe()
            flat[i] = orig - np.float32(h)
            xm, fm = float(flat[i]), probe()
            flat[i] = orig
            gflat[i] = (fp - fm) / (xp - xm)
        grads.append(g)
    return grads


def rel_error(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def check(fn, arrays, seed=0, h=1e-3):
    """Return the worst relative error over all inputs of ``fn``."""
    rng = np.random.default_rng(seed + 10_000)
    out = fn(*[Tensor(a) for a in arrays])
    weights = rng.standard_normal(out.shape).astype(np.float32)
    ga = analytic_grads(fn, arrays, weights)
    gn = numeric_grads(fn, arrays, weights, h=h)
    return max(rel_error(x, y) for x, y in zip(ga, gn))
