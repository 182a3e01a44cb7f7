"""Compiled versus pure-numpy orbit kernels.

Run ``python3 benchmarks/bench_kernels.py [--orbits N] [--steps T]``.  Prints
wall time per backend and the speed-up; the pure path is always available,
the compiled one only when the extension was built.
"""

import argparse
import time

import numpy as np

from wgmlab import kernels


def _state(n, seed):
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.0, 1.0, n)
    theta = rng.integers(0, 2**64, n, dtype=np.uint64, endpoint=False)
    stream = rng.integers(0, 2**64, n, dtype=np.uint64, endpoint=False)
    return x, theta, stream


def bench(backend, orbits, steps, repeat):
    best_orbit, best_ret = np.inf, np.inf
    for r in range(repeat):
        x, th, st = _state(orbits, r)
        t = time.perf_counter()
        kernels.orbit_block(x, th, st, 0.45, 0.15, steps, backend=backend)
        best_orbit = min(best_orbit, time.perf_counter() - t)
        x, th, st = _state(orbits, r)
        t = time.perf_counter()
        kernels.return_times(x * 0.5, th, st, 0.45, 0.15, steps, backend=backend)
        best_ret = min(best_ret, time.perf_counter() - t)
    return best_orbit, best_ret


def main(argv=None):
    p = argparse.ArgumentParser()
    p.add_argument("--orbits", type=int, nargs="+", default=[100, 10_000])
    p.add_argument("--steps", type=int, default=1_000)
    p.add_argument("--repeat", type=int, default=3)
    a = p.parse_args(argv)
    backends = ["python"] + (["cython"] if kernels._compiled is not None else [])
    for n in a.orbits:
        res = {b: bench(b, n, a.steps, a.repeat) for b in backends}
        print(f"orbits={n} steps={a.steps}")
        print(f"{'backend':8} {'orbit_block [s]':>16} {'return_times [s]':>17}")
        for b, (o, r) in res.items():
            print(f"{b:8} {o:16.4f} {r:17.4f}")
        if "cython" in res:
            (po, pr), (co, cr) = res["python"], res["cython"]
            print(f"speed-up: orbit_block x{po / co:.1f}, return_times x{pr / cr:.1f}")
        else:
            print("compiled extension not built; only the fallback was timed")
        print()


if __name__ == "__main__":
    main()
