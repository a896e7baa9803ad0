"""Time the numba and numpy paths of the two-electron kernels.

Usage::

    python3 benchmarks/bench_kernels.py [--sizes 121 241 481] [--repeat 5]

Both paths are called in-process through the ``use_numba`` switch; the
first numba call is excluded (compilation).  The numpy-only run can also be
reproduced end-to-end with ``TDKSLEARN_DISABLE_NUMBA=1``.
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from tdkslearn import kernels
from tdkslearn.grid import build_grid, laplacian4


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def bench(n, repeat, dt=0.0025):
    grid = build_grid(-40.0, 20.0, n - 1, 1.0, 1)
    coeffs = laplacian4(grid).coeffs
    rng = np.random.default_rng(0)
    psi = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
    phase = np.exp(-1j * dt * rng.uniform(-1.0, 0.0, (n, n)))
    tau = 1j * dt / 4.0
    rows = []
    for name, call in [
        ("laplacian2d", lambda u: kernels.laplacian2d(psi, coeffs, use_numba=u)),
        ("split_step", lambda u: kernels.split_step(psi, phase, tau, coeffs, use_numba=u)),
    ]:
        ref = call(False)
        if kernels.HAVE_NUMBA:
            got = call(True)   # compiles on first use
            diff = float(np.max(np.abs(got - ref)) / np.max(np.abs(ref)))
            t_nb = best_of(lambda: call(True), repeat)
        else:
            diff, t_nb = float("nan"), float("nan")
        t_np = best_of(lambda: call(False), repeat)
        rows.append((name, n, t_np, t_nb, t_np / t_nb, diff))
    return rows


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", type=int, nargs="+", default=[121, 241, 481])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    print(f"numba available: {kernels.HAVE_NUMBA}, default path: "
          f"{'numba' if kernels.USE_NUMBA else 'numpy'}")
    print(f"{'kernel':<12} {'n':>5} {'numpy [ms]':>11} {'numba [ms]':>11} {'speedup':>8} {'rel diff':>9}")
    for n in args.sizes:
        for name, size, t_np, t_nb, speed, diff in bench(n, args.repeat):
            print(f"{name:<12} {size:>5} {1e3 * t_np:>11.2f} {1e3 * t_nb:>11.2f} "
                  f"{speed:>8.2f} {diff:>9.1e}")


if __name__ == "__main__":
    main()
