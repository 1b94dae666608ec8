"""Time the numba kernels against the numpy fallback.

Runs one E-step plus one gradient evaluation per repeat on random padded
batches, first at a fixed horizon over growing batch sizes, then at a fixed
batch size over growing horizons (the gradient's adjoint pass is quadratic in
the horizon).

    python3 benchmarks/bench_kernels.py --repeats 5
"""
import argparse
import time

import numpy as np

from interpole import Dataset, IohmmParams, Spaces, Trajectory, kernels


def random_batch(rng, n, tau, S=3, A=3, Z=4):
    T = rng.dirichlet(np.ones(S), size=(S, A)) + 0.05
    O = rng.dirichlet(np.ones(Z), size=(A, S)) + 0.05
    params = IohmmParams(T / T.sum(-1, keepdims=True), O / O.sum(-1, keepdims=True), np.ones(S) / S)
    trajs = tuple(Trajectory(np.column_stack([rng.integers(0, A, tau), rng.integers(0, Z, tau)]))
                  for _ in range(n))
    means = rng.dirichlet(np.ones(S), size=A)
    return params, means, Dataset(Spaces(S, A, Z), trajs)


def one_pass(backend, params, means, ds):
    k = kernels.get(backend)
    p = ds.packed
    T, O, b1 = params.transition, params.observation, params.initial
    alpha, scale, _ = k.forward(T, O, b1, p.actions, p.obs, p.observed, p.lengths)
    beta = k.backward(T, O, p.actions, p.obs, p.observed, p.lengths)
    gamma, xi = k.posteriors(alpha, beta, T, O, p.actions, p.obs, p.observed, p.lengths)
    k.grad(T, O, b1, 5.0, means, alpha, scale, gamma, xi, p.actions, p.obs, p.observed, p.lengths, 1e-12)


def timeit(backend, args, repeats):
    one_pass(backend, *args)  # compile / warm caches
    best = np.inf
    for _ in range(repeats):
        t = time.perf_counter()
        one_pass(backend, *args)
        best = min(best, time.perf_counter() - t)
    return best


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    rng = np.random.default_rng(args.seed)

    print(f"{'n':>6} {'tau':>5} {'numpy s':>10} {'numba s':>10} {'speedup':>8}")
    grid = [(n, 10) for n in (100, 1000, 5000)] + [(200, tau) for tau in (5, 20, 50, 100)]
    for n, tau in grid:
        batch = random_batch(rng, n, tau)
        slow = timeit("numpy", batch, args.repeats)
        fast = timeit("numba", batch, args.repeats)
        print(f"{n:>6} {tau:>5} {slow:>10.4f} {fast:>10.4f} {slow / fast:>7.1f}x")


if __name__ == "__main__":
    main()
