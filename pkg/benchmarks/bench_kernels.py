"""Compiled vs numpy kernels: CTC forward-backward and Levenshtein backtrace.

Usage: python benchmarks/bench_kernels.py [--repeats N]
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np

from alignrefine import _pykernels

try:
    from alignrefine import _kernels
except ImportError:  # extension not built
    _kernels = None


def _logprobs(rng, T, V):
    x = rng.normal(size=(T, V))
    return x - np.log(np.exp(x).sum(axis=1, keepdims=True))


def bench(fn, args, repeats):
    t = min(timeit.repeat(lambda: fn(*args), number=1, repeat=repeats))
    return t * 1e6


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=20)
    args = ap.parse_args(argv)
    rng = np.random.default_rng(0)
    impls = [("numpy", _pykernels)] + ([("cython", _kernels)] if _kernels is not None else [])
    if _kernels is None:
        print("compiled extension not built; only the fallback is timed")

    print(f"{'kernel':<28}{'size':>14}" + "".join(f"{n + ' (us)':>16}" for n, _ in impls) + f"{'speedup':>10}")
    for T, L in ((20, 5), (50, 10), (200, 40)):
        lp = _logprobs(rng, T, 17)
        y = rng.integers(1, 17, size=L).astype(np.int64)
        times = [bench(m.ctc_forward_backward, (lp, y, 0), args.repeats) for _, m in impls]
        speed = f"{times[0] / times[-1]:>9.1f}x" if len(times) > 1 else ""
        print(f"{'ctc_forward_backward':<28}{f'T={T} L={L}':>14}" + "".join(f"{t:>16.1f}" for t in times) + speed)
    for n in (8, 32, 128):
        r = rng.integers(0, 16, size=n).astype(np.int64)
        h = rng.integers(0, 16, size=n).astype(np.int64)
        times = [bench(m.edit_ops, (r, h), args.repeats) for _, m in impls]
        speed = f"{times[0] / times[-1]:>9.1f}x" if len(times) > 1 else ""
        print(f"{'edit_ops':<28}{f'n={n}':>14}" + "".join(f"{t:>16.1f}" for t in times) + speed)


if __name__ == "__main__":
    main()
