#!/usr/bin/env python3
"""Time the compiled kernel path against the pure-Python fallback.

The table-update kernel is written once and either njit-compiled or run
as plain Python (see afterimage._backend).  This script feeds both
callables the same seeded load stream, checks they leave identical
table state behind, and reports loads/second plus the speedup.

Run:  python3 benchmarks/bench_backends.py [--loads N] [--repeats R]
"""

from __future__ import annotations

import argparse
import random
import time

from afterimage import kernels
from afterimage._backend import NUMBA_ENABLED
from afterimage.uarch import PrefetchTable
from afterimage.uarch import _NO_TLB_FRAMES, _NO_TLB_META, _NO_TLB_STAMP


def make_stream(n_loads: int, seed: int) -> list[tuple[int, int]]:
    """A mix of creations, stride training and page-crossing jumps."""
    rng = random.Random(seed)
    stream = []
    for _ in range(n_loads):
        tag = rng.randrange(256)
        page = rng.randrange(64) << 12
        stream.append((tag, page + rng.randrange(4096)))
    return stream


def run_once(step, stream) -> tuple[float, int]:
    """Replay the stream through a fresh table; return (seconds, digest)."""
    t = PrefetchTable()
    emitted = 0
    target_sum = 0
    start = time.perf_counter()
    for tag, paddr in stream:
        hit, target, _ = step(tag, paddr, t.tags, t.last, t.stride, t.conf,
                              t.valid, t.mru, _NO_TLB_FRAMES, _NO_TLB_STAMP,
                              _NO_TLB_META, False)
        if hit:
            emitted += 1
            target_sum += target
    elapsed = time.perf_counter() - start
    digest = hash((emitted, target_sum, t.state_hash()))
    return elapsed, digest


def bench(step, stream, repeats: int) -> tuple[float, int]:
    run_once(step, stream[:512])  # warm up (and compile, if applicable)
    best, digest = run_once(step, stream)
    for _ in range(repeats - 1):
        elapsed, again = run_once(step, stream)
        assert again == digest, "non-deterministic replay"
        best = min(best, elapsed)
    return best, digest


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--loads", type=int, default=200_000)
    parser.add_argument("--repeats", type=int, default=5)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    stream = make_stream(args.loads, args.seed)
    compiled = kernels.table_step
    fallback = getattr(compiled, "py_func", compiled)

    if not NUMBA_ENABLED:
        print("numba disabled (AFTERIMAGE_NUMBA=0 or not installed); "
              "timing the pure-Python path only")
        best, _ = bench(fallback, stream, args.repeats)
        print(f"pure python : {best:8.3f} s  "
              f"({args.loads / best:12,.0f} loads/s)")
        return

    t_compiled, d_compiled = bench(compiled, stream, args.repeats)
    t_fallback, d_fallback = bench(fallback, stream, args.repeats)
    assert d_compiled == d_fallback, "backends disagree on final state"

    print(f"loads per run: {args.loads:,}   best of {args.repeats}")
    print(f"compiled    : {t_compiled:8.3f} s  "
          f"({args.loads / t_compiled:12,.0f} loads/s)")
    print(f"pure python : {t_fallback:8.3f} s  "
          f"({args.loads / t_fallback:12,.0f} loads/s)")
    print(f"speedup     : {t_fallback / t_compiled:8.2f}x  "
          f"(identical final table state)")


if __name__ == "__main__":
    main()
