"""Time the numba kernels against their pure-numpy twins on Garnet transition tables.

    python benchmarks/bench_kernels.py [--repeat 20]

Both variants are imported directly, so the APILAB_DISABLE_NUMBA switch does
not matter here. Each kernel is warmed up once (JIT compilation) before
timing, and the outputs of the two variants are compared for bitwise equality.
"""
import argparse
import time

import numpy as np

from apilab import _kernels
from apilab.garnet import GarnetParams, generate_garnet

SIZES = [(50, 2, 1), (100, 5, 2), (200, 5, 4), (400, 10, 8)]


def _time(fn, args, repeat):
    fn(*args)
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=20)
    args = parser.parse_args()
    if _kernels.numba_kernels is None:
        raise SystemExit("numba is not importable; nothing to compare")

    print(f"{'problem':<18}{'kernel':<15}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}  identical")
    for ns, na, b in SIZES:
        mdp, _ = generate_garnet(GarnetParams(ns, na, b, 1, seed=1), gamma=0.99)
        rng = np.random.default_rng(0)
        v = rng.random(ns)
        weights = np.full((ns, na), 1.0 / na)
        h = rng.random((ns, ns))
        inputs = {
            "expected_next": (mdp.succ, mdp.prob, v),
            "dense_kernel": (mdp.succ, mdp.prob, weights, ns),
            "reach_step": (mdp.succ, mdp.prob, h),
        }
        for name, call_args in inputs.items():
            fast, slow = _kernels.numba_kernels[name], _kernels.numpy_kernels[name]
            t_np = _time(slow, call_args, args.repeat)
            t_nb = _time(fast, call_args, args.repeat)
            same = np.array_equal(fast(*call_args), slow(*call_args))
            label = f"G({ns},{na},{b},1)"
            print(f"{label:<18}{name:<15}{1e3 * t_np:>10.3f}{1e3 * t_nb:>10.3f}{t_np / t_nb:>9.1f}  {same}")


if __name__ == "__main__":
    main()
