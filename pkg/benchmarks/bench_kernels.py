"""Compare the numba and numpy kernel backends.

Times each kernel on both paths (after a warm-up call so JIT compilation is
not counted), checks the outputs agree bit for bit, and optionally times a
full forward/backward solve under each backend in a child process.

    python benchmarks/bench_kernels.py [--paths 100000] [--repeat 5] [--solve]
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from fbsde_relax import _kernels as K


def _best(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def kernel_cases(n_paths):
    rng = np.random.default_rng(0)
    walk = np.cumsum(rng.standard_normal((n_paths // 10, 64)), axis=1)
    idx = rng.integers(0, 256, size=n_paths)
    vals = rng.standard_normal((n_paths, 3))
    paths = np.arange(n_paths)
    return {
        "counter_uniforms": (
            lambda: K.counter_uniforms_numpy(7, paths, 3, 5),
            lambda: K.counter_uniforms_numba(7, paths, 3, 5),
        ),
        "upcross_counts": (
            lambda: K.upcross_counts_numpy(walk, -0.5, 0.5),
            lambda: K.upcross_counts_numba(walk, -0.5, 0.5),
        ),
        "bin_sums": (
            lambda: K.bin_sums_numpy(idx, vals, 256),
            lambda: K.bin_sums_numba(idx, vals, 256),
        ),
    }


_SOLVE = """
import time
from fbsde_relax import PicardConfig, RegressionSpec, TimeGrid, solve
from fbsde_relax.builtins import get_builtin
c, space, control, _ = get_builtin("lq-decoupled").make()
grid = TimeGrid.uniform(1.0, 64)
q = control(grid)
solve(c, q, grid, 0.0, 1000, 0, RegressionSpec(), PicardConfig())
t0 = time.perf_counter()
solve(c, q, grid, 0.0, {n}, 0, RegressionSpec(), PicardConfig())
print(time.perf_counter() - t0)
"""


def time_solve(n_paths, backend):
    env = dict(os.environ, FBSDE_RELAX_NUMBA="1" if backend == "numba" else "0")
    out = subprocess.run([sys.executable, "-c", _SOLVE.format(n=n_paths)], env=env,
                         capture_output=True, text=True, check=True)
    return float(out.stdout.strip().splitlines()[-1])


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--paths", type=int, default=100_000)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--solve", action="store_true", help="also time an end-to-end solve per backend")
    args = ap.parse_args(argv)
    if not K.HAVE_NUMBA:
        print("numba is not installed; nothing to compare")
        return 1

    print(f"{'kernel':<18}{'numpy [ms]':>12}{'numba [ms]':>12}{'speedup':>10}  identical")
    for name, (f_np, f_nb) in kernel_cases(args.paths).items():
        a, b = f_np(), f_nb()  # warm-up and JIT
        same = all(np.array_equal(x, y) for x, y in zip(a, b)) if isinstance(a, tuple) else np.array_equal(a, b)
        t_np, t_nb = _best(f_np, args.repeat), _best(f_nb, args.repeat)
        print(f"{name:<18}{1e3 * t_np:>12.2f}{1e3 * t_nb:>12.2f}{t_np / t_nb:>10.1f}  {same}")

    if args.solve:
        # the Euler loop calls Python coefficient callbacks, so the gain here is small
        for backend in ("numpy", "numba"):
            print(f"solve lq-decoupled N=64 n={args.paths} [{backend}]: {time_solve(args.paths, backend):.3f} s")
    return 0


if __name__ == "__main__":
    sys.exit(main())
