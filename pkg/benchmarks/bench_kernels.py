#!/usr/bin/env python3
"""Timing comparison of the numba kernels against the pure-numpy fallback.

Runs each hot kernel on solver-scale inputs under both implementations and
prints a table of per-call times and speedups.  The same comparison drives
the backend choice documented in the README (ENTROFLOW_BACKEND=numpy forces
the fallback for a whole process).

Usage: python3 benchmarks/bench_kernels.py [--repeats 2000]
"""

import argparse
import sys
import time
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

import entroflow._kernels as kernels  # noqa: E402


def time_call(fn, args, repeats):
    fn(*args)  # warm-up / JIT compile
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn(*args)
    return (time.perf_counter() - t0) / repeats


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--repeats", type=int, default=2000)
    args = parser.parse_args()

    rng = np.random.default_rng(0)
    n = 64
    cases = []

    cp2 = np.ascontiguousarray(rng.normal(size=(n, n)))
    b2 = rng.normal(size=n)
    cases.append(("lse_contract_2 (64x64)", kernels.lse_contract_2_np,
                  "_lse_contract_2_nb", (cp2, b2)))

    cp3 = np.ascontiguousarray(rng.normal(size=(16, 16, 16)))
    b3a, b3b = rng.normal(size=16), rng.normal(size=16)
    cases.append(("lse_contract_3 (16^3)", kernels.lse_contract_3_np,
                  "_lse_contract_3_nb", (cp3, b3a, b3b)))

    w = rng.random(n)
    w /= w.sum()
    v = rng.normal(size=n + 1)
    v[0] = v[-1] = 0.0
    h = 1.0 / n
    dt = 0.4 * h * h / 2
    cases.append(("fv_step (n=64, SG)", kernels.fv_step_np,
                  "_fv_step_nb", (w, v, 1.0, dt, h)))
    cases.append(("fv_step (n=64, upwind)", kernels.fv_step_np,
                  "_fv_step_nb", (w, v, 0.0, dt, h)))

    print(f"numba available: {kernels._HAS_NUMBA}   active backend: {kernels.BACKEND}")
    print(f"{'kernel':28s} {'numpy':>12s} {'numba':>12s} {'speedup':>9s}")
    for name, np_fn, nb_name, call_args in cases:
        t_np = time_call(np_fn, call_args, args.repeats)
        if kernels._HAS_NUMBA:
            nb_fn = getattr(kernels, nb_name)
            t_nb = time_call(nb_fn, call_args, args.repeats)
            print(f"{name:28s} {t_np * 1e6:10.2f}us {t_nb * 1e6:10.2f}us "
                  f"{t_np / t_nb:8.1f}x")
        else:
            print(f"{name:28s} {t_np * 1e6:10.2f}us {'-':>12s} {'-':>9s}")


if __name__ == "__main__":
    main()
