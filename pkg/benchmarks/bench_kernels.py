"""Time the compiled kernels against the numpy fallback at training shapes.

    python benchmarks/bench_kernels.py [--repeat 20]

Prints one line per kernel with the median time of each backend, the speedup,
and the largest absolute disagreement between the two outputs.
"""

import argparse
import statistics
import time

import numpy as np

from arcvq import _pykernels

try:
    from arcvq import _ckernels
except ImportError:
    _ckernels = None


def _median_time(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times), out


def _diff(a, b):
    if isinstance(a, tuple):
        return max(_diff(x, y) for x, y in zip(a, b))
    return float(np.max(np.abs(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64))))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--tokens", type=int, default=256 * 49, help="N, tokens per batch")
    ap.add_argument("--entries", type=int, default=512, help="K, codebook size")
    ap.add_argument("--dim", type=int, default=64)
    ap.add_argument("--k", type=int, default=3)
    args = ap.parse_args()
    if _ckernels is None:
        raise SystemExit("compiled extension not built; run `pip install -e .` with Cython available")

    rng = np.random.default_rng(0)
    n, K, d = args.tokens, args.entries, args.dim
    cos = np.clip(rng.normal(scale=0.3, size=(n, K)), -1.0, 1.0)
    index = rng.integers(0, K, size=n)
    src = rng.normal(size=(n, d))
    pos = _pykernels.topk_columns(cos, args.k)

    cases = {
        "topk_columns": lambda mod: mod.topk_columns(cos, args.k),
        "arc_columns": lambda mod: mod.arc_columns(cos, pos, 10.0, 0.1, 1e-7),
        "scatter_add_rows": lambda mod: mod.scatter_add_rows(index, src, K),
    }
    print(f"N={n} K={K} d={d} k={args.k} repeat={args.repeat}")
    print(f"{'kernel':<18} {'python ms':>10} {'cython ms':>10} {'speedup':>8} {'max |diff|':>11}")
    for name, call in cases.items():
        tp, op = _median_time(lambda: call(_pykernels), args.repeat)
        tc, oc = _median_time(lambda: call(_ckernels), args.repeat)
        print(f"{name:<18} {1e3 * tp:10.2f} {1e3 * tc:10.2f} {tp / tc:7.1f}x {_diff(op, oc):11.2e}")


if __name__ == "__main__":
    main()
