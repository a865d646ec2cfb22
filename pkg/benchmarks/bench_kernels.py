"""Compare the compiled kernels against the numpy fallback.

Run with ``python3 benchmarks/bench_kernels.py [--repeat N]``.
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np

from kgrerank import _pykernels

try:
    from kgrerank import _ckernels
except ImportError:  # pragma: no cover - depends on the build
    _ckernels = None


def workloads(rng: np.random.Generator):
    B, K, N, E = 256, 30, 2048, 2000
    p = rng.random((B, K))
    s = rng.random((B, K))
    order = np.argsort(-rng.random((B, K)), axis=1)
    logits = rng.normal(size=K)
    orderings = np.argsort(rng.random((N, E)), axis=1)
    gold = rng.integers(0, E, size=N)
    filt = (rng.random((N, E)) < 0.01).astype(np.uint8)
    filt[np.arange(N), gold] = 0
    return {
        f"hinge_rank_batch B={B} K={K}": lambda m: m.hinge_rank_batch(p, s, 100.0 / K**2),
        f"pl_nll_batch B={B} K={K}": lambda m: m.pl_nll_batch(p, order),
        f"masked_greedy K={K}": lambda m: m.masked_greedy(logits),
        f"filtered_ranks N={N} E={E}": lambda m: m.filtered_ranks(orderings, gold, filt),
    }


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    backends = {"numpy": _pykernels}
    if _ckernels is not None:
        backends["cython"] = _ckernels
    else:
        print("compiled extension not built; numpy timings only")
    print(f"{'kernel':<34}" + "".join(f"{b:>12}" for b in backends) + ("    speedup" if len(backends) > 1 else ""))
    for name, fn in workloads(np.random.default_rng(0)).items():
        times = {}
        for b, mod in backends.items():
            fn(mod)
            n = 3
            times[b] = min(timeit.repeat(lambda: fn(mod), number=n, repeat=args.repeat)) / n
        line = f"{name:<34}" + "".join(f"{t * 1e3:>10.3f}ms" for t in times.values())
        if len(times) > 1:
            line += f"{times['numpy'] / times['cython']:>10.1f}x"
        print(line)


if __name__ == "__main__":
    main()
