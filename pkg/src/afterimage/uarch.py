"""IP-stride prefetcher model.

The modeled unit is a 24-entry fully associative history table indexed by
the low 8 bits of the load instruction pointer.  There is no further IP
tag, so instructions whose addresses agree in those bits share an entry.
Each entry tracks the owner's last physical address, a 13-bit signed byte
stride and a 2-bit confidence counter; replacement is Bit-PLRU.  Once
confidence reaches 2 every subsequent load through the entry triggers a
prefetch of current address + stride, even while the entry is being
retrained on a different stride.

Page behaviour: a load whose translation misses the TLB while sitting on
a different page frame than the entry's last address only warms the TLB;
the entry is neither updated nor triggered.  Prefetch targets are
restricted to the load's own frame or the immediately following one.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .kernels import CONF_MAX, CONF_TRIGGER, STRIDE_LIMIT, TABLE_SLOTS

LINE_BYTES = 64
PAGE_BYTES = 4096
LINE_SHIFT = kernels.LINE_SHIFT
PAGE_SHIFT = kernels.PAGE_SHIFT

Address = int


def line_index(addr: Address) -> int:
    return addr >> LINE_SHIFT


def page_frame(addr: Address) -> int:
    return addr >> PAGE_SHIFT

def page_offset(addr: Address) -> int:
    return addr & (PAGE_BYTES - 1)


def ip_tag(full_ip: Address) -> int:
    """Table index of a load instruction: low 8 bits of its IP."""
    return full_ip & 0xFF


@dataclass(frozen=True)
class PrefetchRequest:
    """A prefetch the table asked the cache hierarchy to perform."""
    target: Address
    origin_tag: int
    issued_at: int = 0


@dataclass(frozen=True)
class PrefetcherEntry:
    """Read-only snapshot of one table slot."""
    ip_tag: int
    last_addr: Address
    stride: int
    confidence: int
    valid: bool
    mru_bit: bool


class Tlb:
    """LRU set of recently translated physical page frames."""

    def __init__(self, capacity: int = 64):
        if capacity < 1:
            raise ValueError("tlb capacity must be at least 1")
        self.capacity = capacity
        self.frames = np.zeros(capacity, dtype=np.int64)
        self.stamp = np.zeros(capacity, dtype=np.int64)
        self.meta = np.zeros(1, dtype=np.int64)

    def lookup(self, frame: int) -> bool:
        """Hit test; refreshes recency on hit, never installs."""
        return bool(kernels.tlb_lookup(self.frames, self.stamp, self.meta, frame))

    def access(self, frame: int) -> bool:
        """Translate a frame: hit test plus install-on-miss."""
        return bool(kernels.tlb_access(self.frames, self.stamp, self.meta, frame))

    def install(self, frame: int) -> None:
        kernels.tlb_access(self.frames, self.stamp, self.meta, frame)

    def __contains__(self, frame: int) -> bool:
        return any(self.stamp[i] != 0 and self.frames[i] == frame
                   for i in range(self.capacity))

    def clear(self) -> None:
        self.stamp[:] = 0
        self.meta[0] = 0


# dummy TLB arrays passed to the kernel when translation is disabled
_NO_TLB_FRAMES = np.zeros(1, dtype=np.int64)
_NO_TLB_STAMP = np.zeros(1, dtype=np.int64)
_NO_TLB_META = np.zeros(1, dtype=np.int64)


class PrefetchTable:
    """The 24-entry stride history table."""

    SLOTS = TABLE_SLOTS

    def __init__(self):
        self.tags = np.zeros(self.SLOTS, dtype=np.int64)
        self.last = np.zeros(self.SLOTS, dtype=np.int64)
        self.stride = np.zeros(self.SLOTS, dtype=np.int64)
        self.conf = np.zeros(self.SLOTS, dtype=np.int64)
        self.valid = np.zeros(self.SLOTS, dtype=np.bool_)
        self.mru = np.zeros(self.SLOTS, dtype=np.bool_)

    # -- queries ---------------------------------------------------------

    def lookup(self, tag: int) -> int | None:
        """Slot index owning the tag, or None.  Pure query, no state change."""
        for i in range(self.SLOTS):
            if self.valid[i] and self.tags[i] == tag:
                return i
        return None

    def entry(self, slot: int) -> PrefetcherEntry:
        return PrefetcherEntry(
            ip_tag=int(self.tags[slot]),
            last_addr=int(self.last[slot]),
            stride=int(self.stride[slot]),
            confidence=int(self.conf[slot]),
            valid=bool(self.valid[slot]),
            mru_bit=bool(self.mru[slot]),
        )

    def entry_for(self, tag: int) -> PrefetcherEntry | None:
        slot = self.lookup(tag)
        return None if slot is None else self.entry(slot)

    def occupancy(self) -> int:
        return int(self.valid.sum())

    def state_hash(self) -> str:
        h = hashlib.sha256()
        for arr in (self.tags, self.last, self.stride, self.conf,
                    self.valid, self.mru):
            h.update(arr.tobytes())
        return h.hexdigest()

    # -- updates ---------------------------------------------------------

    def observe_load(self, tlb: Tlb | None, full_ip: Address, paddr: Address,
                     now: int = 0) -> list[PrefetchRequest]:
        """Feed one demand load; returns the prefetches it triggered (0 or 1)."""
        if tlb is None:
            tf, ts, tm, on = _NO_TLB_FRAMES, _NO_TLB_STAMP, _NO_TLB_META, False
        else:
            tf, ts, tm, on = tlb.frames, tlb.stamp, tlb.meta, True
        tag = ip_tag(full_ip)
        emitted, target, _slot = kernels.table_step(
            tag, paddr, self.tags, self.last, self.stride, self.conf,
            self.valid, self.mru, tf, ts, tm, on)
        if emitted:
            return [PrefetchRequest(target=int(target), origin_tag=tag, issued_at=now)]
        return []

    def plru_touch(self, slot: int) -> None:
        kernels.plru_touch(self.mru, slot)

    def plru_select_victim(self) -> int:
        """Replacement choice among a full table: lowest slot with mru clear."""
        if not self.valid.all():
            raise ValueError("victim selection requires a fully valid table")
        victim = kernels.plru_victim(self.mru)
        if victim < 0:  # unreachable when bits are maintained via plru_touch
            raise RuntimeError("all mru bits set; recency bookkeeping corrupted")
        return int(victim)

    def reset(self, write_ports: int = 1) -> int:
        """Invalidate every entry; returns the cycles the wipe occupies."""
        if write_ports < 1:
            raise ValueError("write_ports must be >= 1")
        self.tags[:] = 0
        self.last[:] = 0
        self.stride[:] = 0
        self.conf[:] = 0
        self.valid[:] = False
        self.mru[:] = False
        return math.ceil(self.SLOTS / write_ports)


def reset_prefetcher(table: PrefetchTable, write_ports: int = 1) -> int:
    return table.reset(write_ports)
