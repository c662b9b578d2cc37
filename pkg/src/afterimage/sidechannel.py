"""Cache observation channels and stride inference.

Prime+Probe works on per-line eviction sets: prime fills each set and
records a hit baseline, probe re-walks it and flags sets whose time moved
by more than the latency threshold in either direction.  Flush+Reload
walks the 64 lines of a shared page in Fisher-Yates-shuffled order and
keeps them resident afterwards.

Both observers talk to the cache only, modelling a pointer-chasing,
serialised measurement loop that the prefetcher cannot learn from; they
never touch the table.  flush_reload can optionally route its loads
through the table to reproduce the self-noise of a naive sequential
observer, either with one shared IP or with a reserved per-line tag.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field

from .cache import CacheModel, MinimalEvictionSet
from .uarch import LINE_BYTES, PrefetchTable, Tlb

PAGE_LINES = 64


@dataclass
class TimingVector:
    """Per-target access times for one measurement phase."""
    phase: str
    targets: list[int]
    times: list[int]

    def rows(self):
        return [{"phase": self.phase, "target": t, "time": c}
                for t, c in zip(self.targets, self.times)]


@dataclass
class StrideDetection:
    candidates: list[int]
    support: dict[int, int]
    detected: int | None
    ambiguous: bool
    ranked: list[int] = field(default_factory=list)

    def rows(self):
        return [{"candidate": c, "pairs": self.support.get(c, 0),
                 "detected": c == self.detected} for c in self.candidates]


@dataclass(frozen=True)
class StatusProbe:
    """Replay coordinates for one trained entry."""
    tag: int
    ip: int
    replay_addr: int
    stride: int


def prime(cache: CacheModel, mes_list: list[MinimalEvictionSet]) -> TimingVector:
    """Fill every eviction set, then measure the steady hit baseline."""
    for mes in mes_list:
        for addr in mes.members:
            cache.access(addr)
    times = []
    for mes in mes_list:
        times.append(sum(cache.access(addr) for addr in mes.members))
    return TimingVector("prime", [m.set_index for m in mes_list], times)


def probe(cache: CacheModel, mes_list: list[MinimalEvictionSet],
          baseline: TimingVector,
          threshold: int | None = None) -> tuple[list[bool], TimingVector]:
    """Re-walk the sets; a set is evicted iff |time - baseline| > threshold.

    The walk reverses the prime order: under true LRU a same-order probe
    would evict its own next element after a single victim insertion and
    read the whole set as missing.
    """
    if threshold is None:
        threshold = cache.config.threshold
    times = []
    for mes in mes_list:
        times.append(sum(cache.access(addr) for addr in reversed(mes.members)))
    tv = TimingVector("probe", [m.set_index for m in mes_list], times)
    evicted = [abs(t - b) > threshold for t, b in zip(times, baseline.times)]
    return evicted, tv


def flush_page(cache: CacheModel, page_base: int,
               n_lines: int = PAGE_LINES) -> None:
    cache.flush_lines(page_base, n_lines)


def flush_reload(cache: CacheModel, page_base: int, rng: random.Random,
                 threshold: int | None = None, n_lines: int = PAGE_LINES,
                 table: PrefetchTable | None = None, tlb: Tlb | None = None,
                 observer_tag_base: int = 0, single_ip: int | None = None,
                 shuffle: bool = True) -> set[int]:
    """Measure which page lines are cached; leaves all of them resident.

    With a table supplied revision loads are fed to the prefetcher as
    well: through one fixed IP (single_ip) or through a reserved tag per
    line starting at observer_tag_base.
    """
    if threshold is None:
        threshold = cache.config.threshold
    order = list(range(n_lines))
    if shuffle:
        rng.shuffle(order)
    cached = set()
    for i in order:
        addr = page_base + i * LINE_BYTES
        if cache.access(addr) < threshold:
            cached.add(i)
        if table is not None:
            ip = single_ip if single_ip is not None else \
                0x7E0000 | ((observer_tag_base + i) & 0xFF)
            for req in table.observe_load(tlb, ip, addr):
                cache.install_prefetch(req)
    return cached


def detect_stride(observed, candidates: list[int]) -> StrideDetection:
    """Look for line pairs whose distance matches exactly one candidate.

    Candidates must be pairwise distinct and each wider than 4 lines.
    The winner needs strictly more supporting pairs than any other
    candidate; a tie is reported as ambiguous, never resolved by guessing.
    """
    if len(set(candidates)) != len(candidates):
        raise ValueError("candidate strides must be pairwise distinct")
    if any(c <= 4 for c in candidates):
        raise ValueError("candidate strides must exceed 4 lines")
    lines = sorted(set(observed))
    support = {c: 0 for c in candidates}
    for i, a in enumerate(lines):
        for b in lines[i + 1:]:
            if b - a in support:
                support[b - a] += 1
    ranked = sorted((c for c in candidates if support[c]),
                    key=lambda c: (-support[c], c))
    if not ranked:
        return StrideDetection(list(candidates), support, None, False, [])
    if len(ranked) > 1 and support[ranked[0]] == support[ranked[1]]:
        return StrideDetection(list(candidates), support, None, True, ranked)
    return StrideDetection(list(candidates), support, ranked[0],
                           len(ranked) > 1, ranked)


def prefetcher_status_probe(table: PrefetchTable, tlb: Tlb | None,
                            cache: CacheModel, probes: list[StatusProbe],
                            threshold: int | None = None,
                            drop_targets: frozenset | set = frozenset(),
                            ) -> dict[int, bool]:
    """Check which trained entries still trigger.

    Replays each trained IP once at its expected next address and times
    the single line the old stride would fetch.  An entry whose stride
    was disturbed in the meantime no longer prefetches it, so the load
    misses.  Unlike the pure cache observers this does feed the table.

    Tags listed in drop_targets lose their target line between install
    and timing, modelling an unrelated eviction inside the probe window.
    """
    if threshold is None:
        threshold = cache.config.threshold
    verdict = {}
    for p in probes:
        target = p.replay_addr + p.stride
        cache.flush_line(target)
        requests = table.observe_load(tlb, p.ip, p.replay_addr)
        cache.access(p.replay_addr)
        for req in requests:
            cache.install_prefetch(req)
        if p.tag in drop_targets:
            cache.flush_line(target)
        verdict[p.tag] = cache.access(target) < threshold
    return verdict
