"""Reverse-engineering benches, attack rigs and the flush mitigation.

The ``rev_*`` functions re-run the microbenchmarks that pinned down the
stride prefetcher's behaviour: which IP bits select a table entry, how
the confidence counter gates triggering, what happens at page
boundaries, how many entries the table holds and which ones get
replaced.  Each returns a small result object whose ``verify`` method
diffs the measured verdicts against the documented behaviour, so the
CLI can self-check.

``run_attack`` drives the three covert/side-channel variants end to
end: a shared-address-space victim, a cross-process victim reached
through a shared page, and a kernel syscall reached through shared
memory.  ``mitigation_eval`` measures what periodically clearing the
table costs in prefetch coverage.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field
from pathlib import Path

from .cache import CacheModel, MinimalEvictionSet, build_eviction_set
from .programs import (
    KERNEL_CODE_BASE,
    Domain,
    FlushLines,
    Machine,
    Program,
    SecretSource,
    _stride_bytes,
    build_gadget,
    build_kernel_syscall,
    build_victim,
    ip_matching_groups,
    ip_with_tag,
)
from .sidechannel import (
    PAGE_LINES,
    StatusProbe,
    detect_stride,
    flush_reload,
    prefetcher_status_probe,
    prime,
    probe,
)
from .uarch import (
    LINE_BYTES,
    PAGE_BYTES,
    PrefetchTable,
    Tlb,
    line_index,
    page_frame,
)

#: Clock used to convert flush periods given in microseconds.
DEFAULT_CLOCK_GHZ = 3.6


def flush_period_cycles(period_us: float, ghz: float = DEFAULT_CLOCK_GHZ) -> int:
    """Convert a flush period in microseconds to clock cycles."""
    return round(period_us * 1000.0 * ghz)


# --------------------------------------------------------------------------
# noise model
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class NoiseModel:
    """Background activity injected between the victim and the observer.

    p_evict is the chance, per probed line (or per probed set), that
    unrelated traffic evicts it before the observer times it.
    p_extra_load is the chance that one unrelated line of the observed
    page is sitting in the cache when the observer looks.  When
    next_line_noise is set, the two lines adjacent to every victim
    access are installed as well, imitating an adjacent-line prefetcher.

    All randomness derives from (seed, round index), never from the
    probabilities, so sweeping a probability replays identical draws
    and noise events at a higher setting are a superset of those at a
    lower one.
    """

    p_evict: float = 0.0
    p_extra_load: float = 0.0
    next_line_noise: bool = False
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("p_evict", "p_extra_load"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {value}")


def _round_rng(seed: int, noise_seed: int, index: int) -> random.Random:
    return random.Random((seed * 1_000_003 + noise_seed) * 1_000_003 + index)


def _apply_page_noise(cache: CacheModel, noise: NoiseModel,
                      rng: random.Random, page_paddr: int,
                      victim_lines: list[int]) -> None:
    """Disturb the observed page.  Draw counts are fixed per round so
    probability sweeps consume identical random streams."""
    if noise.next_line_noise:
        for ln in victim_lines:
            for neighbour in (ln - 1, ln + 1):
                if 0 <= neighbour < PAGE_LINES:
                    cache.install_prefetch(page_paddr + neighbour * LINE_BYTES)
    extra_u = rng.random()
    extra_line = rng.randrange(PAGE_LINES)
    if extra_u < noise.p_extra_load:
        cache.access(page_paddr + extra_line * LINE_BYTES)
    for ln in range(PAGE_LINES):
        if rng.random() < noise.p_evict:
            cache.flush_line(page_paddr + ln * LINE_BYTES)


def _apply_probe_noise(cache: CacheModel, noise: NoiseModel,
                       rng: random.Random,
                       mes_list: list[MinimalEvictionSet]) -> None:
    """Unrelated traffic landing in monitored sets: kicks one member
    out of an eviction set, which the probe then reads as a hit."""
    for mes in mes_list:
        if rng.random() < noise.p_evict:
            cache.flush_line(mes.members[0])


# --------------------------------------------------------------------------
# shared bench plumbing
# --------------------------------------------------------------------------


class _Bench:
    """A bare table/TLB/cache triple for the reverse-engineering runs.

    The attack rigs go through :class:`~afterimage.programs.Machine`;
    these benches only need the load path and a timing read.
    """

    def __init__(self, cache_config=None) -> None:
        self.table = PrefetchTable()
        self.tlb = Tlb()
        self.cache = CacheModel(cache_config)

    def warm_translation(self, paddr: int) -> None:
        """Install a page translation without touching the prefetcher,
        the way buffer initialisation before a trial would."""
        self.tlb.access(page_frame(paddr))

    def load(self, ip: int, paddr: int) -> int:
        requests = self.table.observe_load(self.tlb, ip, paddr)
        latency = self.cache.access(paddr)
        for req in requests:
            self.cache.install_prefetch(req)
        return latency

    def flush(self, paddr: int) -> None:
        # flushing a line needs its translation, so it warms the TLB
        self.tlb.access(page_frame(paddr))
        self.cache.flush_line(paddr)

    def is_hot(self, paddr: int) -> bool:
        return self.cache.access(paddr) < self.cache.config.threshold


# --------------------------------------------------------------------------
# entry indexing: which IP bits select a table entry
# --------------------------------------------------------------------------


@dataclass
class IndexingResult:
    """Which of the 256 probe IPs reused the trained entry."""

    trained_tag: int
    stride_lines: int
    triggered: list[bool]

    def matching_offsets(self) -> list[int]:
        return [off for off, hit in enumerate(self.triggered) if hit]

    def verify(self) -> list[str]:
        problems = []
        for off, hit in enumerate(self.triggered):
            want = off == self.trained_tag
            if hit != want:
                problems.append(
                    f"ip low byte 0x{off:02x}: triggered={hit}, expected {want}")
        return problems

    def rows(self) -> list[dict]:
        return [{"offset": off, "triggered": int(hit)}
                for off, hit in enumerate(self.triggered)]


def rev_indexing(trained_tag: int = 0x2C, stride_lines: int = 7,
                 cache_config=None) -> IndexingResult:
    """Train one entry, then replay from 256 differently-tagged IPs.

    The probe IP differs from the training IP in its page bits and in
    bit 9, keeping only a chosen low byte.  A probe that stale-triggers
    the trained stride proves the table keyed solely on those eight
    bits; a probe that allocates a fresh entry fetches nothing.
    """
    if not 0 <= trained_tag <= 0xFF:
        raise ValueError("trained_tag must fit in one byte")
    sb = _stride_bytes(stride_lines)
    train_page = 0x100000
    replay_page = 0x180000
    train_ip = ip_with_tag(0x400000, trained_tag)
    # several pages away and bit 9 flipped: matches nothing but the low byte
    replay_base = (0x400000 + 0x2000) ^ 0x200
    triggered = []
    for offset in range(256):
        bench = _Bench(cache_config)
        bench.warm_translation(train_page)
        bench.warm_translation(replay_page)
        for i in range(4):
            bench.load(train_ip, train_page + i * sb)
        bench.load(ip_with_tag(replay_base, offset), replay_page)
        triggered.append(bench.is_hot(replay_page + sb))
    return IndexingResult(trained_tag, stride_lines, triggered)


# --------------------------------------------------------------------------
# confidence counter and stride replacement
# --------------------------------------------------------------------------


@dataclass
class ConfStrideResult:
    """Per-iteration fetch labels after switching the access stride."""

    st1: int
    st2: int
    tr1: int
    tr2: int
    offset_mode: str
    labels: list[int | None]
    log: list[dict]
    expected: list[int | None]

    def verify(self) -> list[str]:
        problems = []
        for i, (got, want) in enumerate(zip(self.labels, self.expected)):
            if got != want:
                problems.append(
                    f"iteration {i}: fetched {got}, expected {want}")
        return problems

    def rows(self) -> list[dict]:
        return [dict(row) for row in self.log]


def rev_conf_stride(st1: int = 7, st2: int = 5, tr1: int = 4, tr2: int = 3,
                    offset_mode: str = "random", seed: int = 0,
                    cache_config=None) -> ConfStrideResult:
    """Train a stride, switch to another, and watch what gets fetched.

    Phase one walks ``tr1`` loads at stride ``st1`` lines; phase two
    walks ``tr2`` loads at stride ``st2``, starting either exactly one
    ``st2`` step past the last phase-one load (``offset_mode="equals_st2"``)
    or at a random jump (``"random"``).  After every phase-two load the
    lines one ``st1`` and one ``st2`` ahead are timed; the label is the
    stride whose line came in.  A confident entry fetches with its old
    stride once before relearning, so the first phase-two load is
    labelled ``st1``; afterwards the counter has to climb back past the
    trigger threshold before ``st2`` fetches appear.
    """
    if offset_mode not in ("random", "equals_st2"):
        raise ValueError(f"unknown offset_mode {offset_mode!r}")
    if tr1 < 1 or tr2 < 1:
        raise ValueError("both training phases need at least one load")
    if st1 == st2 or st1 < 1 or st2 < 1:
        raise ValueError("strides must be distinct positive line counts")
    sb1 = _stride_bytes(st1)
    sb2 = _stride_bytes(st2)
    page = 0x200000
    ip = ip_with_tag(0x400000, 0x51)
    rng = random.Random(seed)

    bench = _Bench(cache_config)
    bench.warm_translation(page)
    last = page + (tr1 - 1) * sb1
    for i in range(tr1):
        bench.load(ip, page + i * sb1)
    if offset_mode == "equals_st2":
        start = last + sb2
    else:
        # land well clear of the phase-one footprint, on neither stride
        allowed = [j for j in range(8, 20) if j not in (st1, st2)]
        start = last + rng.choice(allowed) * LINE_BYTES
    end = start + (tr2 - 1) * sb2 + max(sb1, sb2)
    if page_frame(end) != page_frame(page):
        raise ValueError("training phases do not fit in one page")

    labels: list[int | None] = []
    log = []
    for i in range(tr2):
        addr = start + i * sb2
        bench.load(ip, addr)
        hot1 = bench.is_hot(addr + sb1)
        hot2 = bench.is_hot(addr + sb2)
        if hot1 and not hot2:
            label = st1
        elif hot2 and not hot1:
            label = st2
        else:
            label = None
        labels.append(label)
        log.append({"iteration": i, f"st1_{st1}_hot": int(hot1),
                    f"st2_{st2}_hot": int(hot2),
                    "label": "" if label is None else label})

    first = st1 if tr1 >= 3 else None
    if offset_mode == "equals_st2":
        expected = [first] + [st2] * (tr2 - 1)
    else:
        expected = [first, None] + [st2] * (tr2 - 2)
    expected = expected[:tr2]
    return ConfStrideResult(st1, st2, tr1, tr2, offset_mode,
                            labels, log, expected)


# --------------------------------------------------------------------------
# page boundaries: reclaimed frames vs fresh frames
# --------------------------------------------------------------------------


@dataclass
class PageResult:
    """Whether a trained entry still fetched N pages past its training.

    ``verdicts`` maps (pool, offset_pages) to the timing verdict.  The
    reclaimed pool maps every virtual page onto one recycled physical
    frame, so the walk never really leaves it; the locked pool hands
    out fresh frames, where only the immediately next page — whose
    translation the hardware pre-walks — still fetches.
    ``cold_next_page`` holds the two verdicts of the next-page trial
    when that translation starts cold: the first access only installs
    it, the second one fetches.
    """

    verdicts: dict[tuple[str, int], bool]
    cold_next_page: tuple[bool, bool]

    def verify(self) -> list[str]:
        problems = []
        for (pool, off), got in sorted(self.verdicts.items()):
            want = pool == "reclaimed" or off == 1
            if got != want:
                problems.append(
                    f"{pool} pool, {off} page(s) ahead: "
                    f"triggered={got}, expected {want}")
        if self.cold_next_page != (False, True):
            problems.append(
                "cold next-page trial: expected (first=False, second=True), "
                f"got {self.cold_next_page}")
        return problems

    def rows(self) -> list[dict]:
        out = []
        for (pool, off), got in sorted(self.verdicts.items()):
            warm = pool == "reclaimed" or off == 1
            out.append({"pool": pool, "offset_pages": off,
                        "tlb": "warm" if warm else "cold",
                        "access": 1, "triggered": int(got)})
        for i, got in enumerate(self.cold_next_page):
            out.append({"pool": "locked", "offset_pages": 1, "tlb": "cold",
                        "access": i + 1, "triggered": int(got)})
        return out


def _page_trial(pool: str, offset_pages: int, *, two_access: bool = False,
                precondition_next: bool = True,
                cache_config=None) -> list[bool]:
    sb = _stride_bytes(7)
    vbase = 0x300000
    if pool == "reclaimed":
        # every virtual page of the walk recycles the same physical frame
        frame0 = page_frame(0x5FA000)
        fmap = {page_frame(vbase) + i: frame0 for i in range(5)}
        dom = Domain("bench", frame_map=fmap)
    elif pool == "locked":
        dom = Domain("bench")
    else:
        raise ValueError(f"unknown pool {pool!r}")
    bench = _Bench(cache_config)
    ip = ip_with_tag(0x400000, 0x9D)
    bench.warm_translation(dom.translate(vbase))
    if pool == "locked" and precondition_next:
        # the hardware walks the adjacent page's translation as a
        # stream nears the boundary, so the very next frame starts warm
        bench.warm_translation(dom.translate(vbase + PAGE_BYTES))
    for i in range(4):
        bench.load(ip, dom.translate(vbase + i * sb))
    # probe mid-page so the timed line overlaps nothing from training
    test_vaddr = vbase + offset_pages * PAGE_BYTES + 2048
    flags = []
    for attempt in range(2 if two_access else 1):
        test_paddr = dom.translate(test_vaddr)
        if attempt:
            bench.flush(test_paddr + sb)
        bench.load(ip, test_paddr)
        flags.append(bench.is_hot(test_paddr + sb))
    return flags


def rev_page(cache_config=None) -> PageResult:
    """Probe a trained entry one to four pages past its training walk."""
    verdicts = {}
    for pool in ("reclaimed", "locked"):
        for off in (1, 2, 3, 4):
            verdicts[(pool, off)] = _page_trial(
                pool, off, cache_config=cache_config)[0]
    cold = tuple(_page_trial("locked", 1, two_access=True,
                             precondition_next=False,
                             cache_config=cache_config))
    return PageResult(verdicts, cold)


# --------------------------------------------------------------------------
# table capacity
# --------------------------------------------------------------------------


@dataclass
class EntriesResult:
    """Replay verdicts after training ``n_ips`` distinct-tag streams."""

    n_ips: int
    alive: list[bool]

    def dead_positions(self) -> list[int]:
        return [i + 1 for i, ok in enumerate(self.alive) if not ok]

    def verify(self) -> list[str]:
        problems = []
        overflow = max(0, self.n_ips - 24)
        for i, ok in enumerate(self.alive):
            want = i >= overflow
            if ok != want:
                problems.append(
                    f"stream {i + 1}/{self.n_ips}: alive={ok}, expected {want}")
        return problems

    def rows(self) -> list[dict]:
        return [{"position": i + 1, "alive": int(ok)}
                for i, ok in enumerate(self.alive)]


def rev_entries(n_ips: int, cache_config=None) -> EntriesResult:
    """Train ``n_ips`` streams in order, then replay each one once.

    A replay that still fetches proves its entry survived; training
    more streams than the table holds silently drops the oldest.  Each
    stream is probed in its own fresh run so a dead stream's replay
    (which allocates and thereby evicts) cannot contaminate the next
    verdict.
    """
    if not 1 <= n_ips <= 48:
        raise ValueError("n_ips must be between 1 and 48")
    sb = 448
    alive = []
    for probed in range(n_ips):
        bench = _Bench(cache_config)
        for j in range(n_ips):
            ip = ip_with_tag(0x400000 + j * 0x1000, j)
            page = 0x1000000 + j * PAGE_BYTES
            for i in range(4):
                bench.load(ip, page + i * sb)
        page = 0x1000000 + probed * PAGE_BYTES
        probe_addr = page + 4 * sb
        bench.load(ip_with_tag(0x400000 + probed * 0x1000, probed), probe_addr)
        alive.append(bench.is_hot(probe_addr + sb))
    return EntriesResult(n_ips, alive)


# --------------------------------------------------------------------------
# replacement order
# --------------------------------------------------------------------------


@dataclass
class ReplacementResult:
    """Which of 24 resident streams newcomers pushed out."""

    n_retrain: int
    n_new: int
    alive: list[bool]

    def evicted_positions(self) -> list[int]:
        return [i + 1 for i, ok in enumerate(self.alive) if not ok]

    def verify(self) -> list[str]:
        if self.n_retrain + self.n_new > 23:
            return []  # recency bits wrap; no closed-form expectation
        want = list(range(self.n_retrain + 1,
                          self.n_retrain + self.n_new + 1))
        got = self.evicted_positions()
        if got != want:
            return [f"evicted positions {got}, expected {want}"]
        return []

    def rows(self) -> list[dict]:
        return [{"position": i + 1, "alive": int(ok)}
                for i, ok in enumerate(self.alive)]


def rev_replacement(n_retrain: int = 8, n_new: int = 8,
                    cache_config=None) -> ReplacementResult:
    """Fill the table, refresh a prefix, then push in new streams.

    Trains 24 streams (filling the table), re-touches the first
    ``n_retrain`` of them, trains ``n_new`` fresh streams, and replays
    every original to see which survived.  The victims come right after
    the refreshed prefix: the single-bit recency scheme evicts the
    lowest-numbered entry whose bit is clear, not the globally oldest.
    """
    if not 0 <= n_retrain <= 24 or not 0 <= n_new <= 24:
        raise ValueError("n_retrain and n_new must be between 0 and 24")
    sb = 448
    alive = []
    for probed in range(24):
        bench = _Bench(cache_config)
        pos = {}
        for j in range(24):
            ip = ip_with_tag(0x400000 + j * 0x1000, j)
            page = 0x1000000 + j * PAGE_BYTES
            for i in range(4):
                bench.load(ip, page + i * sb)
            pos[j] = 4
        for j in range(n_retrain):
            ip = ip_with_tag(0x400000 + j * 0x1000, j)
            page = 0x1000000 + j * PAGE_BYTES
            bench.load(ip, page + pos[j] * sb)
            pos[j] += 1
        for j in range(n_new):
            tag = 24 + j
            ip = ip_with_tag(0x400000 + tag * 0x1000, tag)
            page = 0x1000000 + tag * PAGE_BYTES
            for i in range(4):
                bench.load(ip, page + i * sb)
        ip = ip_with_tag(0x400000 + probed * 0x1000, probed)
        page = 0x1000000 + probed * PAGE_BYTES
        probe_addr = page + pos[probed] * sb
        bench.load(ip, probe_addr)
        alive.append(bench.is_hot(probe_addr + sb))
    return ReplacementResult(n_retrain, n_new, alive)


# --------------------------------------------------------------------------
# attack rigs
# --------------------------------------------------------------------------


class UnsupportedChannelError(ValueError):
    """Raised for a variant/channel pairing that has no measurement."""


ATTACK_CHANNELS = {
    1: ("prime_probe", "flush_reload", "status_probe"),
    2: ("flush_reload",),
    3: ("flush_reload",),
}


@dataclass(frozen=True)
class RoundRecord:
    """One transmitted bit and what the observer made of it."""

    index: int
    truth: int
    detected: int | None
    inferred: int | None
    success: bool


@dataclass
class AttackOutcome:
    """Everything one attack run produced, ready for CSV."""

    variant: int
    channel: str
    records: list[RoundRecord]
    seed: int
    noise: NoiseModel
    flush_on_switch: bool
    detail: dict = field(default_factory=dict)

    @property
    def success_rate(self) -> float:
        return sum(r.success for r in self.records) / len(self.records)

    def rows(self) -> list[dict]:
        return [{
            "round": r.index,
            "truth": r.truth,
            "detected_stride": "" if r.detected is None else r.detected,
            "inferred": "" if r.inferred is None else r.inferred,
            "success": int(r.success),
        } for r in self.records]


def _page_load_lines(events, frame: int) -> list[int]:
    return sorted({(ev.paddr >> 6) & (PAGE_LINES - 1) for ev in events
                   if ev.kind == "load" and page_frame(ev.paddr) == frame})


def _mes_for_line(cache: CacheModel, page_paddr: int,
                  line: int) -> MinimalEvictionSet:
    addr = page_paddr + line * LINE_BYTES
    set_index = cache.set_of(addr)
    slice_index = cache.slice_of(addr)
    own = line_index(addr)
    sets = cache.config.sets_per_slice

    def pool():
        for k in range(1, 4096):
            candidate = set_index + k * sets
            if candidate != own:
                yield candidate * LINE_BYTES

    return build_eviction_set(cache, set_index, slice_index, pool())


def _secret_source(seed: int, flush_on_switch: bool) -> SecretSource:
    # Under the mitigation every bit is sent as 1: with a random secret
    # a dead channel would still agree with the truth half the time,
    # which would mask the blockage.
    if flush_on_switch:
        return SecretSource(bits=[1])
    return SecretSource(seed=seed ^ 0x5EC2E7)


def _infer_two_sided(detected: int | None, stride_if: int,
                     stride_else: int) -> int | None:
    if detected == stride_if:
        return 1
    if detected == stride_else:
        return 0
    return None


def _same_space_attack(machine: Machine, channel: str, rounds: int,
                       noise: NoiseModel, seed: int,
                       flush_on_switch: bool):
    """Variant 1: gadget, victim and observer share one address space.

    The gadget trains both candidate tags with distinct strides; the
    victim's secret-dependent branch executes a single load whose IP
    low byte collides with one of them, firing that entry's stale
    stride into the victim's own array where the observer can see it.
    """
    stride_if, stride_else = 7, 13
    if_tag, else_tag = 0x3A, 0xB4
    gadget_code, victim_code = 0x400000, 0x700000
    gadget_if, gadget_else = 0x10000, 0x12000
    victim_page = 0x600000
    iters = 3
    dom = Domain("proc")
    source = _secret_source(seed, flush_on_switch)
    gadget = build_gadget(if_tag, else_tag, stride_if, stride_else,
                          iterations=iters, code_base=gadget_code,
                          array_if=gadget_if, array_else=gadget_else)
    victim = build_victim(source, if_tag, else_tag, array_base=victim_page,
                          array_lines=48, code_base=victim_code)
    flush_prog = Program("flush", [FlushLines(victim_page, PAGE_LINES)])
    obs_paddr = dom.translate(victim_page)
    obs_frame = page_frame(obs_paddr)
    # the victim initialised its array earlier; the translation is warm
    machine.tlb.access(obs_frame)

    mes_list = None
    if channel == "prime_probe":
        mes_list = [_mes_for_line(machine.cache, obs_paddr, ln)
                    for ln in range(PAGE_LINES)]
    sb_if = _stride_bytes(stride_if)
    sb_else = _stride_bytes(stride_else)
    probes = [
        StatusProbe(if_tag, ip_with_tag(gadget_code, if_tag),
                    dom.translate(gadget_if) + iters * sb_if, sb_if),
        StatusProbe(else_tag, ip_with_tag(gadget_code + 0x1000, else_tag),
                    dom.translate(gadget_else) + iters * sb_else, sb_else),
    ]

    records = []
    for i in range(rounds):
        rng = _round_rng(seed, noise.seed, i)
        machine.run_program(dom, gadget, rng)
        if channel == "flush_reload":
            machine.run_program(dom, flush_prog, rng)
        baseline = None
        if channel == "prime_probe":
            baseline = prime(machine.cache, mes_list)
        events = machine.run_program(dom, victim, rng)
        truth = source.history[-1]
        victim_lines = _page_load_lines(events, obs_frame)

        if channel == "status_probe":
            dropped = {t for t in (if_tag, else_tag)
                       if rng.random() < noise.p_evict}
            alive = prefetcher_status_probe(
                machine.table, machine.tlb, machine.cache, probes,
                drop_targets=dropped)
            if not alive[if_tag] and alive[else_tag]:
                detected, inferred = stride_if, 1
            elif not alive[else_tag] and alive[if_tag]:
                detected, inferred = stride_else, 0
            else:
                detected, inferred = None, None
        else:
            _apply_page_noise(machine.cache, noise, rng, obs_paddr,
                              victim_lines)
            if channel == "prime_probe":
                _apply_probe_noise(machine.cache, noise, rng, mes_list)
                evicted, _ = probe(machine.cache, mes_list, baseline)
                observed = {ln for ln, hit in enumerate(evicted) if hit}
            else:
                observed = flush_reload(machine.cache, obs_paddr, rng)
            detection = detect_stride(observed, [stride_if, stride_else])
            detected = detection.detected
            inferred = _infer_two_sided(detected, stride_if, stride_else)
        records.append(RoundRecord(i, truth, detected, inferred,
                                   inferred == truth))
    return records, {}


def _cross_process_attack(machine: Machine, rounds: int, noise: NoiseModel,
                          seed: int, flush_on_switch: bool):
    """Variant 2: the victim runs in another process; a shared page
    carries both the victim's table and the observer's reloads."""
    stride_if, stride_else = 7, 13
    if_tag, else_tag = 0x3A, 0xB4
    shared_vaddr, shared_paddr = 0x640000, 0x500000
    attacker = Domain("attacker", phys_offset=0x10000000)
    victim_dom = Domain("victim", phys_offset=0x20000000)
    attacker.map_shared(shared_vaddr, shared_paddr)
    victim_dom.map_shared(shared_vaddr, shared_paddr)
    source = _secret_source(seed, flush_on_switch)
    gadget = build_gadget(if_tag, else_tag, stride_if, stride_else)
    victim = build_victim(source, if_tag, else_tag, array_base=shared_vaddr,
                          array_lines=48, code_base=0x700000)
    flush_prog = Program("flush", [FlushLines(shared_vaddr, PAGE_LINES)])
    obs_frame = page_frame(shared_paddr)

    records = []
    for i in range(rounds):
        rng = _round_rng(seed, noise.seed, i)
        machine.run_program(attacker, gadget, rng)
        machine.run_program(attacker, flush_prog, rng)
        events = machine.run_program(victim_dom, victim, rng)
        truth = source.history[-1]
        victim_lines = _page_load_lines(events, obs_frame)
        _apply_page_noise(machine.cache, noise, rng, shared_paddr,
                          victim_lines)
        observed = flush_reload(machine.cache, shared_paddr, rng)
        detection = detect_stride(observed, [stride_if, stride_else])
        inferred = _infer_two_sided(detection.detected, stride_if,
                                    stride_else)
        records.append(RoundRecord(i, truth, detection.detected, inferred,
                                   inferred == truth))
    return records, {}


def _user_kernel_attack(machine: Machine, rounds: int, noise: NoiseModel,
                        seed: int, flush_on_switch: bool):
    """Variant 3: the victim load sits inside a syscall handler.

    Kernel code addresses are hidden, so the rig first hunts for a user
    IP whose low byte collides with the handler's load: it trains
    groups of 24 tag-consecutive streams and checks after a forced
    syscall whether the trained stride appeared on the shared page.
    Scored rounds then retrain the matching group before every call.
    """
    stride = 11
    kernel_tag = 0x4B
    shared_paddr = 0x7A0000
    kernel_vaddr = 0xFFFF80000000
    user = Domain("user")
    kernel = Domain("kernel", kind="kernel", phys_offset=0x80000000)
    kernel.map_shared(kernel_vaddr, shared_paddr)
    source = _secret_source(seed, flush_on_switch)
    syscall = build_kernel_syscall(source, kernel_tag, kernel_vaddr,
                                   array_lines=48)
    # the search phase forces the interesting branch with known inputs
    search_syscall = build_kernel_syscall(SecretSource(bits=[1]), kernel_tag,
                                          kernel_vaddr, array_lines=48)
    groups = ip_matching_groups(n_groups=20, group_size=24,
                                stride_lines=stride, iterations=3)
    flush_prog = Program("flush", [FlushLines(shared_paddr, PAGE_LINES)])

    # Each group gets a few tries: a failed probe's own load allocates
    # an entry right where the next training pass recycles slots, so
    # the first pass over a matching group can lose the one entry that
    # matters.  A repeat finds the table mostly trained and keeps it.
    search_rng = random.Random(seed * 7919 + 13)
    matched = None
    for g, group_prog in enumerate(groups):
        for _attempt in range(3):
            machine.run_program(user, group_prog, search_rng)
            machine.run_program(user, flush_prog, search_rng)
            machine.run_program(kernel, search_syscall, search_rng)
            observed = flush_reload(machine.cache, shared_paddr, search_rng)
            if detect_stride(observed, [stride]).detected == stride:
                matched = g
                break
        if matched is not None:
            break
    # nothing matched (e.g. table flushed on every switch): carry on
    # with an arbitrary group so the scored rounds still run honestly
    group_prog = groups[matched if matched is not None else 0]

    records = []
    for i in range(rounds):
        rng = _round_rng(seed, noise.seed, i)
        machine.run_program(user, group_prog, rng)
        machine.run_program(user, flush_prog, rng)
        events = machine.run_program(kernel, syscall, rng)
        truth = source.history[-1]
        victim_lines = _page_load_lines(events, page_frame(shared_paddr))
        _apply_page_noise(machine.cache, noise, rng, shared_paddr,
                          victim_lines)
        observed = flush_reload(machine.cache, shared_paddr, rng)
        detection = detect_stride(observed, [stride])
        inferred = 1 if detection.detected == stride else 0
        records.append(RoundRecord(i, truth, detection.detected, inferred,
                                   inferred == truth))
    return records, {"matched_group": matched}


def run_attack(variant: int, channel: str, rounds: int = 200,
               noise: NoiseModel | None = None, seed: int = 0,
               flush_on_switch: bool = False,
               cache_config=None) -> AttackOutcome:
    """Run one attack variant end to end and score every round.

    Variant 1 needs victim and observer in one address space and
    supports all three observation channels.  Variants 2 (cross
    process) and 3 (user to kernel) leak through a shared page, which
    only flush+reload can read.  ``flush_on_switch`` arms the
    mitigation that clears the prefetch table on every context switch;
    mitigated runs transmit an all-ones secret so that chance agreement
    cannot dress up a dead channel as a working one.
    """
    if variant not in ATTACK_CHANNELS:
        raise UnsupportedChannelError(
            f"unknown variant {variant}; choose one of 1, 2, 3")
    if channel not in ATTACK_CHANNELS[variant]:
        allowed = ", ".join(ATTACK_CHANNELS[variant])
        raise UnsupportedChannelError(
            f"variant {variant} supports only {allowed}, not {channel!r}")
    if rounds < 1:
        raise ValueError("rounds must be positive")
    noise = noise if noise is not None else NoiseModel()
    machine = Machine(
        cache=CacheModel(cache_config),
        flush_policy="flush_on_switch" if flush_on_switch else "none")
    if variant == 1:
        records, detail = _same_space_attack(machine, channel, rounds, noise,
                                             seed, flush_on_switch)
    elif variant == 2:
        records, detail = _cross_process_attack(machine, rounds, noise, seed,
                                                flush_on_switch)
    else:
        records, detail = _user_kernel_attack(machine, rounds, noise, seed,
                                              flush_on_switch)
    return AttackOutcome(variant, channel, records, seed, noise,
                         flush_on_switch, detail)


# --------------------------------------------------------------------------
# mitigation cost
# --------------------------------------------------------------------------


@dataclass
class MitigationReport:
    """Prefetch coverage with and without periodic table clearing."""

    flush_period: int | None
    write_ports: int
    loads: int
    flushes: int
    reset_cycles: int
    baseline_misses: int
    prefetch_requests: int
    useful_prefetches: int
    coverage: float
    coverage_no_flush: float

    @property
    def coverage_delta(self) -> float:
        return self.coverage_no_flush - self.coverage

    def rows(self) -> list[dict]:
        return [{
            "flush_period": "" if self.flush_period is None
            else self.flush_period,
            "write_ports": self.write_ports,
            "loads": self.loads,
            "flushes": self.flushes,
            "reset_cycles": self.reset_cycles,
            "baseline_misses": self.baseline_misses,
            "prefetch_requests": self.prefetch_requests,
            "useful_prefetches": self.useful_prefetches,
            "coverage": f"{self.coverage:.6f}",
            "coverage_no_flush": f"{self.coverage_no_flush:.6f}",
            "coverage_delta": f"{self.coverage_delta:.6f}",
        }]


def synthetic_workload(n_loads: int = 144_000, n_ips: int = 8,
                       stride_lines: int = 7,
                       code_base: int = 0x900000,
                       data_base: int = 0x20000000,
                       spacing: int = 1 << 24) -> list[tuple[int, int]]:
    """Interleave ``n_ips`` fixed-stride streams, one load per turn."""
    sb = _stride_bytes(stride_lines)
    ips = [ip_with_tag(code_base + k * 0x1000, 0x10 + k)
           for k in range(n_ips)]
    if n_loads // n_ips * sb >= spacing:
        raise ValueError("streams would overlap; increase spacing")
    loads = []
    for i in range(n_loads):
        k = i % n_ips
        step = i // n_ips
        loads.append((ips[k], data_base + k * spacing + step * sb))
    return loads


def load_trace(path: str | Path) -> list[tuple[int, int, int]]:
    """Parse a load trace: one ``ip_hex,vaddr_hex,domain_id`` per line.

    Blank lines and lines starting with ``#`` are skipped.  Malformed
    lines raise ValueError naming the file and line number.
    """
    records = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 3:
            raise ValueError(
                f"{path}:{lineno}: expected ip_hex,vaddr_hex,domain_id, "
                f"got {line!r}")
        try:
            ip = int(parts[0], 16)
            vaddr = int(parts[1], 16)
            domain_id = int(parts[2])
        except ValueError:
            raise ValueError(
                f"{path}:{lineno}: malformed field in {line!r}") from None
        records.append((ip, vaddr, domain_id))
    return records


def _run_stream(loads, use_prefetcher: bool, flush_period: int | None,
                write_ports: int, cycles_per_load: int, cache_config=None):
    table = PrefetchTable()
    tlb = Tlb()
    cache = CacheModel(cache_config)
    clock = 0
    flushes = 0
    reset_cycles = 0
    requests_issued = 0
    next_flush = flush_period
    for ip, paddr in loads:
        while next_flush is not None and clock >= next_flush:
            cost = table.reset(write_ports)
            clock += cost
            reset_cycles += cost
            flushes += 1
            next_flush += flush_period
        if use_prefetcher:
            requests = table.observe_load(tlb, ip, paddr)
            requests_issued += len(requests)
        else:
            requests = ()
        cache.access(paddr)
        for req in requests:
            cache.install_prefetch(req)
        clock += cycles_per_load
    return cache, flushes, reset_cycles, requests_issued


def mitigation_eval(workload=None, flush_period_cycles: int | None = 36_000,
                    write_ports: int = 1, cycles_per_load: int = 10,
                    cache_config=None) -> MitigationReport:
    """Measure the coverage a periodic table flush costs a workload.

    The workload is a list of (ip, address) loads — tuples with a third
    domain field, as produced by :func:`load_trace`, are accepted and
    the domain ignored.  Coverage is the fraction of the
    prefetcher-off miss count that prefetch hits absorb; the report
    compares a flushed run against an unflushed one on the same loads.
    A period of None (or infinity) disables flushing.
    """
    if workload is None:
        workload = synthetic_workload()
    loads = [(item[0], item[1]) for item in workload]
    if flush_period_cycles is not None and math.isinf(flush_period_cycles):
        flush_period_cycles = None
    reset_cost = math.ceil(24 / write_ports)
    if flush_period_cycles is not None and flush_period_cycles < reset_cost:
        raise ValueError(
            f"flush period {flush_period_cycles} is shorter than the "
            f"{reset_cost}-cycle table reset itself")

    base_cache, _, _, _ = _run_stream(loads, False, None, write_ports,
                                      cycles_per_load, cache_config)
    baseline_misses = base_cache.demand_misses
    on_cache, _, _, _ = _run_stream(loads, True, None, write_ports,
                                    cycles_per_load, cache_config)
    flu_cache, flushes, reset_cycles, requests = _run_stream(
        loads, True, flush_period_cycles, write_ports, cycles_per_load,
        cache_config)

    def coverage(cache: CacheModel) -> float:
        if baseline_misses == 0:
            return 0.0
        return cache.useful_prefetch_hits / baseline_misses

    return MitigationReport(
        flush_period=flush_period_cycles,
        write_ports=write_ports,
        loads=len(loads),
        flushes=flushes,
        reset_cycles=reset_cycles,
        baseline_misses=baseline_misses,
        prefetch_requests=requests,
        useful_prefetches=flu_cache.useful_prefetch_hits,
        coverage=coverage(flu_cache),
        coverage_no_flush=coverage(on_cache),
    )
