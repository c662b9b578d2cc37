"""State-machine kernels for the prefetcher table and TLB.

These functions hold the single authoritative implementation of the
table's update rules.  They operate on flat numpy arrays so the same
source runs either njit-compiled or as plain Python (see _backend).

Table state arrays (one element per slot):
    tags    int64   low-8-bit IP tag of the owning load instruction
    last    int64   physical byte address of the owner's previous load
    stride  int64   signed byte stride, saturated to +/-STRIDE_LIMIT
    conf    int64   2-bit confidence counter
    valid   bool    slot occupied
    mru     bool    Bit-PLRU recency bit

TLB state arrays:
    frames  int64   cached physical page frames
    stamp   int64   LRU timestamps, 0 means the slot is empty
    meta    int64[1] running clock for the timestamps
"""

from ._backend import njit

TABLE_SLOTS = 24
CONF_MAX = 3
CONF_TRIGGER = 2
STRIDE_LIMIT = 2047  # 13-bit signed field: sign plus magnitude

PAGE_SHIFT = 12
LINE_SHIFT = 6


@njit(cache=True)
def plru_touch(mru, slot):
    """Set a slot's recency bit; clear all others first if that would fill the set."""
    if mru[slot]:
        return
    n = 0
    for i in range(mru.shape[0]):
        if mru[i]:
            n += 1
    if n == mru.shape[0] - 1:
        for i in range(mru.shape[0]):
            mru[i] = False
    mru[slot] = True


@njit(cache=True)
def plru_victim(mru):
    """Lowest-index slot whose recency bit is clear (touch keeps one clear)."""
    for i in range(mru.shape[0]):
        if not mru[i]:
            return i
    return -1


@njit(cache=True)
def tlb_lookup(frames, stamp, meta, frame):
    """Hit test with recency refresh; never installs."""
    for i in range(frames.shape[0]):
        if stamp[i] != 0 and frames[i] == frame:
            meta[0] += 1
            stamp[i] = meta[0]
            return True
    return False


@njit(cache=True)
def tlb_access(frames, stamp, meta, frame):
    """Hit test with install-on-miss, evicting the LRU frame when full."""
    meta[0] += 1
    clock = meta[0]
    for i in range(frames.shape[0]):
        if stamp[i] != 0 and frames[i] == frame:
            stamp[i] = clock
            return True
    victim = 0
    best = 0x7FFFFFFFFFFFFFFF
    for i in range(frames.shape[0]):
        s = stamp[i]
        if s == 0:
            victim = i
            break
        if s < best:
            best = s
            victim = i
    frames[victim] = frame
    stamp[victim] = clock
    return False


@njit(cache=True)
def table_step(tag, paddr, tags, last, stride, conf, valid, mru,
               tlb_frames, tlb_stamp, tlb_meta, tlb_on):
    """Feed one demand load to the table.

    Returns (emitted, target, slot).  A load whose page translation
    misses while it sits on a different frame than the entry's previous
    address leaves the entry untouched: the walk consumes the access and
    only a repeat on the now-warm frame can trigger.  Emitted targets are
    confined to the load's own frame or the next one up; anything else
    is dropped after the entry update.
    """
    frame = paddr >> PAGE_SHIFT
    slot = -1
    for i in range(TABLE_SLOTS):
        if valid[i] and tags[i] == tag:
            slot = i
            break

    tlb_hit = True
    if tlb_on:
        tlb_hit = tlb_access(tlb_frames, tlb_stamp, tlb_meta, frame)

    if slot < 0:
        slot = -1
        for i in range(TABLE_SLOTS):
            if not valid[i]:
                slot = i
                break
        if slot < 0:
            slot = plru_victim(mru)
        valid[slot] = True
        tags[slot] = tag
        last[slot] = paddr
        stride[slot] = 0
        conf[slot] = 0
        plru_touch(mru, slot)
        return False, 0, slot

    if (not tlb_hit) and frame != (last[slot] >> PAGE_SHIFT):
        return False, 0, slot

    d = paddr - last[slot]
    sd = d
    if sd > STRIDE_LIMIT:
        sd = STRIDE_LIMIT
    elif sd < -STRIDE_LIMIT:
        sd = -STRIDE_LIMIT

    emitted = False
    target = 0
    c = conf[slot]
    if c >= CONF_TRIGGER:
        # trigger first with the old stride, then reconcile
        emitted = True
        target = paddr + stride[slot]
        if d != stride[slot]:
            stride[slot] = sd
            conf[slot] = 1
        elif c != CONF_MAX:
            conf[slot] = c + 1
    else:
        if d != stride[slot]:
            stride[slot] = sd
            conf[slot] = 1
        else:
            c += 1
            conf[slot] = c
            if c == CONF_TRIGGER:
                emitted = True
                target = paddr + stride[slot]

    last[slot] = paddr
    plru_touch(mru, slot)

    if emitted:
        tf = target >> PAGE_SHIFT
        if tf != frame and tf != frame + 1:
            emitted = False
            target = 0
    return emitted, target, slot


@njit(cache=True)
def run_table_batch(in_tags, in_addrs, tags, last, stride, conf, valid, mru,
                    tlb_frames, tlb_stamp, tlb_meta, tlb_on,
                    out_emit, out_target, out_last, out_stride, out_conf):
    """Replay a load trace, recording each step's emission and touched-entry state."""
    for k in range(in_tags.shape[0]):
        emitted, target, slot = table_step(
            in_tags[k], in_addrs[k], tags, last, stride, conf, valid, mru,
            tlb_frames, tlb_stamp, tlb_meta, tlb_on)
        out_emit[k] = emitted
        out_target[k] = target
        out_last[k] = last[slot]
        out_stride[k] = stride[slot]
        out_conf[k] = conf[slot]
