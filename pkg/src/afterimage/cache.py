"""Sliced, set-associative last-level cache with true LRU per set.

Lines are tracked by their 64-byte line index.  The slice is an XOR-fold
of the line index (a stand-in for the undocumented physical hash), the
set is its low bits.  Timing is whole-line and two-valued: a configured
hit latency and miss latency, with a decision threshold strictly between
them.  Prefetch installs bypass latency accounting but are tagged so a
later demand hit can be attributed to them.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable

from .uarch import LINE_BYTES, PrefetchRequest, line_index


class EvictionSetError(ValueError):
    """Candidate pool ran out before a full eviction set was gathered."""


def _is_pow2(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


@dataclass
class CacheConfig:
    slices: int = 4
    sets_per_slice: int = 2048
    associativity: int = 16
    hit_latency: int = 40
    miss_latency: int = 200
    threshold: int = 120

    def __post_init__(self):
        for name in ("slices", "sets_per_slice", "associativity"):
            if not _is_pow2(getattr(self, name)):
                raise ValueError(f"{name} must be a power of two")
        if not self.hit_latency < self.threshold < self.miss_latency:
            raise ValueError("threshold must lie strictly between hit and miss latency")


@dataclass
class MinimalEvictionSet:
    """Exactly associativity-many lines mapping to one (set, slice)."""
    set_index: int
    slice_index: int
    members: list[int] = field(default_factory=list)


class CacheModel:
    def __init__(self, config: CacheConfig | None = None,
                 slice_hash: Callable[[int], int] | None = None):
        self.config = config or CacheConfig()
        self._slice_hash = slice_hash
        self._slice_bits = self.config.slices.bit_length() - 1
        # (slice, set) -> LRU-ordered line indices, most recent last
        self.sets: dict[tuple[int, int], list[int]] = {}
        self._prefetched: set[int] = set()
        self.demand_accesses = 0
        self.demand_misses = 0
        self.prefetch_installs = 0
        self.useful_prefetch_hits = 0

    # -- placement -------------------------------------------------------

    def slice_of(self, paddr: int) -> int:
        li = line_index(paddr)
        if self._slice_hash is not None:
            return self._slice_hash(li) & (self.config.slices - 1)
        if self.config.slices == 1:
            return 0
        h = 0
        mask = self.config.slices - 1
        while li:
            h ^= li & mask
            li >>= self._slice_bits
        return h

    def set_of(self, paddr: int) -> int:
        return line_index(paddr) & (self.config.sets_per_slice - 1)

    def location(self, paddr: int) -> tuple[int, int]:
        return self.slice_of(paddr), self.set_of(paddr)

    # -- operations ------------------------------------------------------

    def contains(self, paddr: int) -> bool:
        li = line_index(paddr)
        return li in self.sets.get(self.location(paddr), ())

    def access(self, paddr: int) -> int:
        """Demand access; returns latency and installs the line on a miss."""
        li = line_index(paddr)
        loc = self.location(paddr)
        ways = self.sets.setdefault(loc, [])
        self.demand_accesses += 1
        if li in ways:
            ways.remove(li)
            ways.append(li)
            if li in self._prefetched:
                self._prefetched.discard(li)
                self.useful_prefetch_hits += 1
            return self.config.hit_latency
        self.demand_misses += 1
        self._install(ways, li)
        return self.config.miss_latency

    def install_prefetch(self, request: PrefetchRequest | int) -> None:
        """Place a prefetched line without latency accounting."""
        paddr = request.target if isinstance(request, PrefetchRequest) else request
        li = line_index(paddr)
        ways = self.sets.setdefault(self.location(paddr), [])
        if li in ways:
            return
        self.prefetch_installs += 1
        self._install(ways, li)
        self._prefetched.add(li)

    def _install(self, ways: list[int], li: int) -> None:
        if len(ways) >= self.config.associativity:
            evicted = ways.pop(0)
            self._prefetched.discard(evicted)
        ways.append(li)

    def flush_line(self, paddr: int) -> None:
        li = line_index(paddr)
        ways = self.sets.get(self.location(paddr))
        if ways and li in ways:
            ways.remove(li)
        self._prefetched.discard(li)

    def flush_lines(self, base: int, n_lines: int) -> None:
        for i in range(n_lines):
            self.flush_line(base + i * LINE_BYTES)

    def reset_stats(self) -> None:
        self.demand_accesses = 0
        self.demand_misses = 0
        self.prefetch_installs = 0
        self.useful_prefetch_hits = 0


def build_eviction_set(cache: CacheModel, set_index: int, slice_index: int,
                       candidate_pool: Iterable[int]) -> MinimalEvictionSet:
    """Collect associativity-many distinct lines mapping to the target set."""
    want = cache.config.associativity
    members: list[int] = []
    seen: set[int] = set()
    for addr in candidate_pool:
        if cache.location(addr) != (slice_index, set_index):
            continue
        li = line_index(addr)
        if li in seen:
            continue
        seen.add(li)
        members.append(li * LINE_BYTES)
        if len(members) == want:
            return MinimalEvictionSet(set_index, slice_index, members)
    raise EvictionSetError(
        f"pool exhausted with {len(members)}/{want} members for "
        f"set {set_index} slice {slice_index}")
