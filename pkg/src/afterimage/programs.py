"""Straight-line victim/attacker programs and their execution.

Programs are flat lists of steps (loads, flushes, secret-dependent
branches, hooks) run by a Machine that owns the prefetcher table, the
TLB and the cache and keeps a cycle clock fed by load latencies.
Domains give each simulated protection context its own page mapping;
translation is identity-plus-offset with explicit per-frame overrides so
that shared memory can alias one physical page from several domains.

Prefetcher and cache state persist across domain switches unless a flush
policy is armed: "flush_on_switch" wipes the table at every switch,
"periodic" wipes it whenever the clock crosses a period boundary.
"""

from __future__ import annotations

import random
import warnings
from dataclasses import dataclass, field
from typing import Callable, Union

from .cache import CacheModel
from .uarch import (
    LINE_BYTES,
    PAGE_BYTES,
    PrefetchTable,
    Tlb,
    page_frame,
)

KERNEL_CODE_BASE = 0x7FFF00F000  # fixed: kernel text is not randomized here

AddrExpr = Union[int, Callable[[random.Random], int]]


class ScheduleError(ValueError):
    pass


def ip_with_tag(code_base: int, tag: int) -> int:
    return (code_base & ~0xFF) | (tag & 0xFF)


def aslr_slide(rng: random.Random, bits: int = 16) -> int:
    """Per-run page-aligned slide; low 12 bits of every IP survive it."""
    return rng.randrange(1 << bits) * PAGE_BYTES


@dataclass(frozen=True)
class Load:
    ip: int
    vaddr: AddrExpr


@dataclass(frozen=True)
class FlushLines:
    vaddr: int
    n_lines: int = 1


@dataclass(frozen=True)
class Branch:
    source: "SecretSource"
    taken: tuple = ()
    not_taken: tuple = ()


@dataclass(frozen=True)
class Hook:
    fn: Callable[["Machine"], None]


Step = Union[Load, FlushLines, Branch, Hook]


@dataclass
class Program:
    name: str
    steps: list = field(default_factory=list)


class SecretSource:
    """Ground-truth bit stream, seeded or user-supplied, with history."""

    def __init__(self, seed: int | None = None, bits: list[int] | None = None):
        if bits is None and seed is None:
            raise ValueError("need a seed or an explicit bit list")
        self._bits = list(bits) if bits is not None else None
        self._pos = 0
        self._rng = random.Random(seed) if bits is None else None
        self.history: list[int] = []

    def next_bit(self) -> int:
        if self._bits is not None:
            bit = self._bits[self._pos % len(self._bits)]
            self._pos += 1
        else:
            bit = self._rng.randrange(2)
        self.history.append(bit)
        return bit


class Domain:
    """Protection context with its own virtual-to-physical mapping."""

    def __init__(self, name: str, kind: str = "user", phys_offset: int = 0,
                 frame_map: dict[int, int] | None = None):
        if kind not in ("user", "kernel"):
            raise ValueError("kind must be 'user' or 'kernel'")
        if phys_offset % PAGE_BYTES:
            raise ValueError("phys_offset must be page aligned")
        self.name = name
        self.kind = kind
        self.phys_offset = phys_offset
        self.frame_map = dict(frame_map or {})

    def map_shared(self, vaddr: int, paddr: int, n_pages: int = 1) -> None:
        """Alias n pages at vaddr onto the physical pages at paddr."""
        if vaddr % PAGE_BYTES or paddr % PAGE_BYTES:
            raise ValueError("shared regions must be page aligned")
        for i in range(n_pages):
            self.frame_map[page_frame(vaddr) + i] = page_frame(paddr) + i

    def translate(self, vaddr: int) -> int:
        frame = page_frame(vaddr)
        if frame in self.frame_map:
            return (self.frame_map[frame] * PAGE_BYTES) | (vaddr & (PAGE_BYTES - 1))
        return vaddr + self.phys_offset


@dataclass
class Event:
    time: int
    domain: str
    kind: str  # load / prefetch / flush / branch / switch / table_reset
    ip: int = 0
    vaddr: int = 0
    paddr: int = 0
    latency: int = 0
    detail: str = ""


@dataclass
class Schedule:
    domains: dict[str, Domain]
    slices: list[tuple[str, Program]]
    flush_policy: str = "none"  # none / flush_on_switch / periodic
    flush_period: int | None = None

    def __post_init__(self):
        if self.flush_policy not in ("none", "flush_on_switch", "periodic"):
            raise ScheduleError(f"unknown flush policy {self.flush_policy!r}")
        if self.flush_policy == "periodic" and not self.flush_period:
            raise ScheduleError("periodic policy needs flush_period")
        for name, _prog in self.slices:
            if name not in self.domains:
                raise ScheduleError(f"schedule references unknown domain {name!r}")


class Machine:
    """Executes programs against one table/TLB/cache triple."""

    def __init__(self, table: PrefetchTable | None = None,
                 tlb: Tlb | None = None,
                 cache: CacheModel | None = None,
                 flush_policy: str = "none",
                 flush_period: int | None = None,
                 write_ports: int = 1):
        self.table = table if table is not None else PrefetchTable()
        self.tlb = tlb if tlb is not None else Tlb()
        self.cache = cache if cache is not None else CacheModel()
        self.flush_policy = flush_policy
        self.flush_period = flush_period
        self.write_ports = write_ports
        self.clock = 0
        self.current_domain: str | None = None
        self.events: list[Event] = []
        self.flush_count = 0
        self.reset_cycles = 0
        self._next_flush = flush_period if flush_policy == "periodic" else None

    # -- flush policy ----------------------------------------------------

    def _reset_table(self, reason: str) -> None:
        cycles = self.table.reset(self.write_ports)
        self.clock += cycles
        self.flush_count += 1
        self.reset_cycles += cycles
        self.events.append(Event(self.clock, self.current_domain or "-",
                                 "table_reset", detail=reason))

    def _tick_periodic(self) -> None:
        if self._next_flush is None:
            return
        while self.clock >= self._next_flush:
            self._reset_table("periodic")
            self._next_flush += self.flush_period

    def _enter(self, domain: Domain) -> None:
        if self.current_domain is not None and domain.name != self.current_domain:
            self.events.append(Event(self.clock, domain.name, "switch",
                                     detail=f"from {self.current_domain}"))
            if self.flush_policy == "flush_on_switch":
                self._reset_table("switch")
        self.current_domain = domain.name

    # -- execution -------------------------------------------------------

    def run_program(self, domain: Domain, program: Program,
                    rng: random.Random | None = None) -> list[Event]:
        rng = rng or random.Random(0)
        self._enter(domain)
        start = len(self.events)
        self._run_steps(domain, program.steps, rng)
        return self.events[start:]

    def _run_steps(self, domain: Domain, steps, rng: random.Random) -> None:
        for step in steps:
            if isinstance(step, Load):
                self._do_load(domain, step, rng)
            elif isinstance(step, FlushLines):
                self._do_flush(domain, step)
            elif isinstance(step, Branch):
                bit = step.source.next_bit()
                self.events.append(Event(self.clock, domain.name, "branch",
                                         detail=str(bit)))
                self._run_steps(domain, step.taken if bit else step.not_taken, rng)
            elif isinstance(step, Hook):
                step.fn(self)
            else:
                raise TypeError(f"unknown step {step!r}")

    def _do_load(self, domain: Domain, step: Load, rng: random.Random) -> None:
        self._tick_periodic()
        vaddr = step.vaddr(rng) if callable(step.vaddr) else step.vaddr
        paddr = domain.translate(vaddr)
        requests = self.table.observe_load(self.tlb, step.ip, paddr, now=self.clock)
        latency = self.cache.access(paddr)
        self.clock += latency
        self.events.append(Event(self.clock, domain.name, "load", step.ip,
                                 vaddr, paddr, latency))
        for req in requests:
            self.cache.install_prefetch(req)
            self.events.append(Event(self.clock, domain.name, "prefetch",
                                     step.ip, 0, req.target,
                                     detail=f"tag {req.origin_tag:#x}"))

    def _do_flush(self, domain: Domain, step: FlushLines) -> None:
        for i in range(step.n_lines):
            vaddr = step.vaddr + i * LINE_BYTES
            paddr = domain.translate(vaddr)
            # flushing needs the translation too, so it warms the TLB
            self.tlb.access(page_frame(paddr))
            self.cache.flush_line(paddr)
        self.events.append(Event(self.clock, domain.name, "flush",
                                 0, step.vaddr, domain.translate(step.vaddr),
                                 detail=f"{step.n_lines} lines"))


def run_schedule(schedule: Schedule, table: PrefetchTable | None = None,
                 tlb: Tlb | None = None, cache: CacheModel | None = None,
                 rng: random.Random | None = None,
                 write_ports: int = 1) -> list[Event]:
    """Run every slice in order on a fresh or supplied machine."""
    machine = Machine(table, tlb, cache, schedule.flush_policy,
                      schedule.flush_period, write_ports)
    rng = rng or random.Random(0)
    for name, program in schedule.slices:
        machine.run_program(schedule.domains[name], program, rng)
    return machine.events


# -- program builders ----------------------------------------------------


def _stride_bytes(stride_lines: int) -> int:
    sb = stride_lines * LINE_BYTES
    if abs(sb) > 2047:
        raise ValueError(f"stride {stride_lines} lines exceeds the 13-bit field")
    return sb


def build_gadget(if_tag: int, else_tag: int, stride_if: int, stride_else: int,
                 iterations: int = 3, code_base: int = 0x400000,
                 array_if: int = 0x10000, array_else: int = 0x12000) -> Program:
    """Training gadget: two load IPs walking distinct strides (in lines)."""
    if if_tag == else_tag:
        raise ValueError("if/else tags must differ")
    sb_if = _stride_bytes(stride_if)
    sb_else = _stride_bytes(stride_else)
    if stride_if == stride_else:
        warnings.warn("equal strides leave the two paths indistinguishable",
                      stacklevel=2)
    ip_if = ip_with_tag(code_base, if_tag)
    ip_else = ip_with_tag(code_base + 0x1000, else_tag)
    steps: list[Step] = []
    for i in range(iterations):
        steps.append(Load(ip_if, array_if + i * sb_if))
        steps.append(Load(ip_else, array_else + i * sb_else))
    return Program("gadget", steps)


def line_picker(array_base: int, array_lines: int):
    """Uniformly random line inside the victim's array."""
    def pick(rng: random.Random) -> int:
        return array_base + rng.randrange(array_lines) * LINE_BYTES
    return pick


def build_victim(source: SecretSource, if_tag: int, else_tag: int,
                 array_base: int, array_lines: int = 48,
                 code_base: int = 0x700000) -> Program:
    """Secret-dependent branch; each arm loads one arbitrary array line."""
    if array_lines < 1 or array_lines > PAGE_BYTES // LINE_BYTES:
        raise ValueError("array must fit one page")
    branch = Branch(
        source,
        taken=(Load(ip_with_tag(code_base, if_tag),
                    line_picker(array_base, array_lines)),),
        not_taken=(Load(ip_with_tag(code_base + 0x1000, else_tag),
                        line_picker(array_base, array_lines)),),
    )
    return Program("victim", [branch])


def build_kernel_syscall(source: SecretSource, tag: int, shared_vaddr: int,
                         array_lines: int = 48) -> Program:
    """Syscall body: when the secret bit is set, one load into shared memory."""
    branch = Branch(
        source,
        taken=(Load(ip_with_tag(KERNEL_CODE_BASE, tag),
                    line_picker(shared_vaddr, array_lines)),),
        not_taken=(),
    )
    return Program("syscall", [branch])


def ip_matching_groups(n_groups: int = 20, group_size: int = 24,
                       stride_lines: int = 11, iterations: int = 3,
                       code_base: int = 0x400000,
                       data_base: int = 0x40000000) -> list[Program]:
    """Training programs whose tags jointly cover the whole 8-bit space.

    Group g holds group_size loads with distinct low-byte tags, each
    walking its own page frame with the given stride.  Each member's
    loads run back to back: when a full table forces every allocation
    to evict, a member that reaches trigger confidence inside its own
    block keeps it even if a later sibling's allocation recycles the
    slot of an earlier one.  Interleaving single loads instead would
    let those evictions land between a member's accesses and no entry
    would ever finish training.
    """
    if n_groups * group_size < 256:
        raise ValueError("groups cannot cover all 256 tags")
    sb = _stride_bytes(stride_lines)
    groups = []
    for g in range(n_groups):
        steps: list[Step] = []
        tags = [(g * group_size + j) % 256 for j in range(group_size)]
        for j, tag in enumerate(tags):
            page = data_base + (g * group_size + j) * PAGE_BYTES
            for i in range(iterations):
                steps.append(Load(ip_with_tag(code_base + g * 0x10000, tag),
                                  page + i * sb))
        groups.append(Program(f"group{g}", steps))
    return groups


def group_tags(n_groups: int, group_size: int) -> list[list[int]]:
    return [[(g * group_size + j) % 256 for j in range(group_size)]
            for g in range(n_groups)]
