"""Time the conv3d kernels under the numpy and numba backends.

Usage::

    python3 benchmarks/bench_kernels.py [--repeat 5]

Shapes are the hot layers of the desk-scale generator and segmenter at
32x32x16. Reports the median wall time per call and checks both backends
agree to float32 rounding.
"""

from __future__ import annotations

import argparse
import statistics
import time

import numpy as np

from echosynth.engine import kernels

# (label, input [N,C,X,Y,Z] already padded, weight [O,C,k,k,k], stride)
CASES = [
    ("gen enc1 k4 s2 1->16", (1, 1, 34, 34, 18), (16, 1, 4, 4, 4), 2),
    ("gen enc2 k4 s2 16->32", (1, 16, 18, 18, 10), (32, 16, 4, 4, 4), 2),
    ("seg block k3 s1 8->8", (2, 8, 34, 34, 18), (8, 8, 3, 3, 3), 1),
    ("seg block k3 s1 16->16", (2, 16, 18, 18, 10), (16, 16, 3, 3, 3), 1),
    ("disc k3 s2 2->16", (1, 2, 34, 34, 18), (16, 2, 3, 3, 3), 2),
]


def _median_time(fn, repeat):
    fn()  # warm-up (JIT compilation for numba)
    ts = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        ts.append(time.perf_counter() - t0)
    return statistics.median(ts)


def run(repeat: int = 5) -> list[dict]:
    rng = np.random.default_rng(0)
    backends = ["numpy"] + (["numba"] if kernels.HAVE_NUMBA else [])
    rows = []
    prev = kernels.get_backend()
    try:
        for label, xs, ws, s in CASES:
            xp = rng.standard_normal(xs).astype(np.float32)
            w = rng.standard_normal(ws).astype(np.float32)
            stride = (s, s, s)
            y = kernels.conv3d_forward(xp, w, stride)
            gy = rng.standard_normal(y.shape).astype(np.float32)
            row = {"case": label}
            outs = {}
            for b in backends:
                kernels.set_backend(b)
                row[f"{b}_fwd"] = _median_time(lambda: kernels.conv3d_forward(xp, w, stride), repeat)
                row[f"{b}_bwd"] = _median_time(lambda: (kernels.conv3d_backward_input(gy, w, stride, xp.shape),
                                                        kernels.conv3d_backward_weight(xp, gy, stride, w.shape)),
                                               repeat)
                outs[b] = kernels.conv3d_forward(xp, w, stride)
            if len(outs) == 2:
                row["max_abs_diff"] = float(np.max(np.abs(outs["numpy"] - outs["numba"])))
            rows.append(row)
    finally:
        kernels.set_backend(prev)
    return rows


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    rows = run(args.repeat)
    has_numba = "numba_fwd" in rows[0]
    head = f"{'case':26s} {'numpy fwd':>10s} {'numpy bwd':>10s}"
    if has_numba:
        head += f" {'numba fwd':>10s} {'numba bwd':>10s} {'speedup':>8s} {'max|diff|':>10s}"
    print(head)
    for r in rows:
        line = f"{r['case']:26s} {1e3 * r['numpy_fwd']:9.2f}ms {1e3 * r['numpy_bwd']:9.2f}ms"
        if has_numba:
            sp = (r["numpy_fwd"] + r["numpy_bwd"]) / (r["numba_fwd"] + r["numba_bwd"])
            line += (f" {1e3 * r['numba_fwd']:9.2f}ms {1e3 * r['numba_bwd']:9.2f}ms {sp:7.2f}x"
                     f" {r['max_abs_diff']:10.2e}")
        print(line)
    if not has_numba:
        print("numba not installed; only the numpy backend was timed")


if __name__ == "__main__":
    main()
