"""Time the clustering kernels under the compiled and the pure-Python backends.

Usage: python3 benchmarks/bench_kernels.py [--n 4096] [--dim 96] [--k 64] [--repeat 5]

Both backends get identical inputs; the script also confirms their outputs are
bit-identical before printing the timings.
"""

import argparse
import timeit

import numpy as np

from reid_uda import kernels


def _inputs(n: int, dim: int, k: int, seed: int = 0):
    g = np.random.default_rng(seed)
    X = g.normal(size=(n, dim))
    C = X[g.choice(n, k, replace=False)].copy()
    cand = g.choice(n, 8, replace=False).astype(np.int64)
    return X, C, cand


def _cases(backend, X, C, cand):
    _, d2 = backend.nearest_centroid(X, C)
    return {
        "nearest_centroid": lambda: backend.nearest_centroid(X, C),
        "candidate_costs": lambda: backend.candidate_costs(X, d2, cand),
        "minibatch_step": lambda: backend.minibatch_step(X[:512], C.copy(), np.zeros(len(C), dtype=np.int64)),
    }


def _check_equal(backends, X, C, cand) -> None:
    outs = {}
    for name, b in backends.items():
        labels, d2 = b.nearest_centroid(X, C)
        C2, counts = C.copy(), np.zeros(len(C), dtype=np.int64)
        step = b.minibatch_step(X[:512], C2, counts)
        outs[name] = (labels, d2, b.candidate_costs(X, d2, cand), step[0], step[1], C2, counts)
    ref = next(iter(outs.values()))
    for name, out in outs.items():
        for a, b in zip(ref, out):
            if not np.array_equal(np.asarray(a), np.asarray(b)):
                raise SystemExit(f"backend {name} disagrees with the reference")


def main(argv=None) -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--n", type=int, default=4096)
    parser.add_argument("--dim", type=int, default=96)
    parser.add_argument("--k", type=int, default=64)
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args(argv)

    X, C, cand = _inputs(args.n, args.dim, args.k)
    backends = kernels.available_backends()
    _check_equal(backends, X, C, cand)
    print(f"n={args.n} dim={args.dim} k={args.k}; best of {args.repeat} runs, milliseconds")
    print(f"{'kernel':<20}" + "".join(f"{name:>12}" for name in backends) + ("     speedup" if len(backends) > 1 else ""))
    timings = {name: {case: min(timeit.repeat(fn, number=1, repeat=args.repeat)) * 1e3
                      for case, fn in _cases(b, X, C, cand).items()} for name, b in backends.items()}
    for case in timings["python"]:
        line = f"{case:<20}" + "".join(f"{timings[name][case]:>12.2f}" for name in backends)
        if "cython" in timings:
            line += f"{timings['python'][case] / timings['cython'][case]:>11.1f}x"
        print(line)


if __name__ == "__main__":
    main()
