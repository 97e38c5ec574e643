"""Compare the compiled kernels against the NumPy fallback.

    python3 benchmarks/bench_backends.py [--interactions N] [--repeats R] [--workers W]

Times one embedding half-step and one projection normal-equation build per
backend on a synthetic dataset, checks that both backends agree and prints
a small table.
"""

from __future__ import annotations

import argparse
import statistics
import time

import numpy as np

from mdals import kernels
from mdals.data import assign_dimensions, popularity_stats
from mdals.harness import synthetic_dataset
from mdals.model import init_params
from mdals.solvers import TrainConfig, projection_system, solve_side, train
from mdals.synthetic import SyntheticConfig


def _time(fn, repeats: int) -> float:
    fn()
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - t0)
    return statistics.median(samples)


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--interactions", type=int, default=200_000)
    ap.add_argument("--entities", type=int, default=4000)
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--workers", type=int, default=1)
    args = ap.parse_args(argv)

    backends = kernels.available_backends()
    if "cython" not in backends:
        print("compiled extension not built; only the python backend is available")
    ds = synthetic_dataset(
        SyntheticConfig(num_users=args.entities, num_items=args.entities, interactions=args.interactions)
    )
    scheme = assign_dimensions(popularity_stats(ds), (2, 4, 6), 0.3)
    base = init_params(scheme, "projected", 0)
    # a couple of iterations so the parameters are not just the initial draw
    base, _ = train(ds, scheme, "projected", TrainConfig(lam=1.0, beta=30.0, iterations=2), eval_hook=None, params=base)
    csr = ds.train_matrix("user")
    ybar = np.ascontiguousarray(base.projected_items())

    print(f"train interactions: {ds.split_size('train')}, workers: {args.workers}")
    print(f"{'kernel':<22}{'backend':<10}{'seconds':>12}{'speedup':>10}")
    results = {}
    for name in backends:
        params = base.copy()

        def half_step():
            solve_side(params, "user", csr, ybar, 1.0, args.workers, name)

        def projection():
            return projection_system(base, "user", 4, csr, None, ybar, args.workers, name)

        results[name] = {
            "solve_side": (_time(half_step, args.repeats), params.user_embeddings.values.copy()),
            "projection_system p=4": (_time(projection, args.repeats), projection()[0]),
        }
    for kernel in ("solve_side", "projection_system p=4"):
        ref = results["python"][kernel][0]
        for name in backends:
            t = results[name][kernel][0]
            print(f"{kernel:<22}{name:<10}{t:>12.5f}{ref / t:>9.1f}x")
    if len(backends) == 2:
        for kernel in ("solve_side", "projection_system p=4"):
            a, b = results["cython"][kernel][1], results["python"][kernel][1]
            err = float(np.max(np.abs(a - b)) / max(1.0, float(np.max(np.abs(b)))))
            print(f"max relative difference in {kernel}: {err:.2e}")


if __name__ == "__main__":
    main()
