"""Physical memory pools: frame allocation, page queues, zeroing, eviction,
and migration between pools.

Every pool keeps the three page queues (active, free, wired); a frame is in
exactly one of them at any time.  The free space is a first-fit run list
over 4KB quanta with power-of-two alignment support.  The host pool is
unbounded and grows on demand, acting as the swap target for device memory.
"""

from __future__ import annotations

import threading
from bisect import bisect_left, insort
from collections import OrderedDict
from enum import Enum, auto

from .core import PAGE_SIZE, PhysAddr, Status, is_pow2
from .logmap import Backed, Swapped
from .pagetable import shootdown

EVICT_BATCH_MIN = 16
HOST_GROW_PAGES = 4096


class FrameState(Enum):
    FREE = auto()
    ACTIVE = auto()
    WIRED = auto()


class PageFrame:
    __slots__ = ("addr", "pool_id", "state", "backing", "tick", "quarantined")

    def __init__(self, addr: int, pool_id: int):
        self.addr = addr
        self.pool_id = pool_id
        self.state = FrameState.ACTIVE
        self.backing = None            # (AddressSpace, va) once mapped
        self.tick = 0
        self.quarantined = False

    @property
    def pa(self) -> PhysAddr:
        return PhysAddr(self.pool_id, self.addr)


class PhysMemPool:
    def __init__(self, owner, begin: int, end: int, unbounded: bool = False):
        self.owner = owner
        self.pool_id = owner.id
        self.begin = begin
        self.end = end
        self.unbounded = unbounded
        self.capacity_pages = (end - begin) // PAGE_SIZE
        self._runs = [(begin, end - begin)]  # sorted free runs (start, len)
        self.active = OrderedDict()          # addr -> frame, LRU order
        self.wired = {}
        self.frames = {}                     # every allocated frame
        self.store = {}                      # addr -> bytearray page contents
        self._lock = threading.RLock()

    # -- free-run bookkeeping ------------------------------------------------

    def free_pages(self) -> int:
        with self._lock:
            return sum(length for _s, length in self._runs) // PAGE_SIZE

    def _carve(self, n_bytes: int, align: int):
        """First fit: lowest-addressed aligned span of n_bytes, or None."""
        for i, (start, length) in enumerate(self._runs):
            base = (start + align - 1) & ~(align - 1)
            waste = base - start
            if waste + n_bytes > length:
                continue
            del self._runs[i]
            if waste:
                self._runs.insert(i, (start, waste))
                i += 1
            tail = length - waste - n_bytes
            if tail:
                self._runs.insert(i, (base + n_bytes, tail))
            return base
        return None

    def _grow(self, min_pages: int) -> None:
        grow = max(min_pages, HOST_GROW_PAGES) * PAGE_SIZE
        self._release_run(self.end, grow)
        self.end += grow
        self.capacity_pages += grow // PAGE_SIZE

    def _release_run(self, start: int, length: int) -> None:
        insort(self._runs, (start, length))
        i = bisect_left(self._runs, (start, length))
        if i + 1 < len(self._runs) and start + length == self._runs[i + 1][0]:
            nxt = self._runs.pop(i + 1)
            self._runs[i] = (start, length + nxt[1])
            length += nxt[1]
        if i > 0 and self._runs[i - 1][0] + self._runs[i - 1][1] == start:
            prev = self._runs.pop(i - 1)
            self._runs[i - 1] = (prev[0], prev[1] + length)

    # -- allocation ----------------------------------------------------------

    def alloc(self, n_pages: int, contiguous: bool = False, align: int = PAGE_SIZE):
        """Move n_pages free->active; returns (status, [PhysAddr per page]).

        A contiguous request is carved as one aligned run; otherwise pages
        may come from scattered runs.  Contents are undefined until
        prepared.
        """
        if n_pages < 1 or not is_pow2(align):
            return Status.ERR_INVALID_ARG, None
        with self._lock:
            if contiguous:
                base = self._carve(n_pages * PAGE_SIZE, align)
                if base is None and self.unbounded:
                    self._grow(n_pages)
                    base = self._carve(n_pages * PAGE_SIZE, align)
                if base is None:
                    return Status.ERR_NOMEM, None
                addrs = [base + i * PAGE_SIZE for i in range(n_pages)]
            else:
                if not self.unbounded and self.free_pages() < n_pages:
                    return Status.ERR_NOMEM, None
                addrs = []
                while len(addrs) < n_pages:
                    base = self._carve(PAGE_SIZE, PAGE_SIZE)
                    if base is None:
                        if self.unbounded:
                            self._grow(n_pages - len(addrs))
                            continue
                        for a in addrs:  # undo partial carve
                            self._release_run(a, PAGE_SIZE)
                        return Status.ERR_NOMEM, None
                    addrs.append(base)
            out = []
            for addr in addrs:
                frame = PageFrame(addr, self.pool_id)
                self.frames[addr] = frame
                self.active[addr] = frame
                out.append(frame.pa)
            return Status.SUCCESS, out

    def free_frames(self, addrs) -> Status:
        with self._lock:
            for addr in addrs:
                frame = self.frames.pop(addr, None)
                if frame is None:
                    continue
                self.active.pop(addr, None)
                self.wired.pop(addr, None)
                self.store.pop(addr, None)
                self._release_run(addr, PAGE_SIZE)
        return Status.SUCCESS

    # -- queue moves ---------------------------------------------------------

    def wire_frames(self, addrs) -> Status:
        with self._lock:
            frames = [self.frames.get(a) for a in addrs]
            if any(f is None or f.state is not FrameState.ACTIVE for f in frames):
                return Status.ERR_INVALID_ARG
            for frame in frames:
                del self.active[frame.addr]
                self.wired[frame.addr] = frame
                frame.state = FrameState.WIRED
        return Status.SUCCESS

    def unwire_frames(self, addrs) -> Status:
        with self._lock:
            frames = [self.frames.get(a) for a in addrs]
            if any(f is None or f.state is not FrameState.WIRED for f in frames):
                return Status.ERR_INVALID_ARG
            for frame in frames:
                del self.wired[frame.addr]
                self.active[frame.addr] = frame
                frame.state = FrameState.ACTIVE
        return Status.SUCCESS

    def touch(self, addr: int, tick: int) -> None:
        with self._lock:
            frame = self.frames.get(addr)
            if frame is None:
                return
            frame.tick = tick
            if frame.state is FrameState.ACTIVE:
                self.active.move_to_end(addr)

    # -- simulated contents --------------------------------------------------

    def read(self, pa: PhysAddr, nbytes: int) -> bytes:
        page = pa.addr & ~(PAGE_SIZE - 1)
        off = pa.addr - page
        with self._lock:
            buf = self.store.get(page)
            if buf is None:
                return bytes(nbytes)
            return bytes(buf[off:off + nbytes])

    def write(self, pa: PhysAddr, data: bytes) -> None:
        page = pa.addr & ~(PAGE_SIZE - 1)
        off = pa.addr - page
        with self._lock:
            buf = self.store.get(page)
            if buf is None:
                buf = bytearray(PAGE_SIZE)
                self.store[page] = buf
            buf[off:off + len(data)] = data

    def zero_frames(self, addrs) -> None:
        with self._lock:
            for addr in addrs:
                self.store.pop(addr, None)

    def counts(self):
        with self._lock:
            return {
                "active": len(self.active),
                "free": self.free_pages(),
                "wired": len(self.wired),
                "capacity": self.capacity_pages,
            }


def register_physmem(dev, begin: int, end: int) -> Status:
    """Attach a local physical memory pool to a device (driver entry point)."""
    if dev.pool is not None:
        return Status.ERR_BUSY
    if begin >= end or begin % PAGE_SIZE or end % PAGE_SIZE:
        return Status.ERR_INVALID_ARG
    dev.pool = PhysMemPool(dev, begin, end)
    dev.machine.pools[dev.id] = dev.pool
    return Status.SUCCESS


def prepare_zero(pool: PhysMemPool, frames, faulting_dev,
                 granularity: int) -> Status:
    """Zero freshly allocated frames through the owner's bulk-zeroing hook.

    ``granularity`` must be one of the faulting device's supported page
    sizes; the byte counter grows by the bytes actually prepared (a granule
    shrinks when neighbours were already backed).
    """
    if granularity not in faulting_dev.caps.supported_page_sizes:
        return Status.ERR_INVALID_ARG
    addrs = [f.addr for f in frames]
    pool.owner.mmu.hooks.page_zero(pool, addrs)
    pool.owner.machine.metrics.add("zero_fill_bytes", len(addrs) * PAGE_SIZE)
    return Status.SUCCESS


def alloc_with_evict(pool: PhysMemPool, n_pages: int, contiguous: bool = False,
                     align: int = PAGE_SIZE, space=None):
    """Allocate, evicting the least-recent pages once on memory pressure.

    A contiguous request that still fails after eviction falls back to
    scattered pages so a large preparation granule degrades instead of
    failing outright.
    """
    status, pas = pool.alloc(n_pages, contiguous, align)
    if status is Status.SUCCESS:
        return status, pas
    evict(pool, max(n_pages, EVICT_BATCH_MIN), space)
    status, pas = pool.alloc(n_pages, contiguous, align)
    if status is not Status.SUCCESS and contiguous:
        status, pas = pool.alloc(n_pages, False, PAGE_SIZE)
    return status, pas


def evict(pool: PhysMemPool, n_pages: int, space=None) -> Status:
    """Migrate the n most inactive unwired pages of a device pool to host.

    Victims are taken in least-recently-accessed order (the active queue is
    kept in access order, so its front is the coldest).  Their holders'
    translations are destroyed with shootdowns and the logical entries are
    re-pointed at host frames (or marked swapped when the host CPU is not
    attached to the victim's space).
    """
    machine = pool.owner.machine
    evicted = 0
    unevictable = set()
    while evicted < n_pages:
        with pool._lock:
            batch = []
            want = min(64, n_pages - evicted)
            for frame in pool.active.values():
                if frame.addr in unevictable:
                    continue
                if frame.backing is None or frame.quarantined:
                    unevictable.add(frame.addr)
                    continue
                batch.append(frame)
                if len(batch) >= want:
                    break
        if not batch:
            break
        for frame in batch:
            fspace, va = frame.backing
            if _evict_one(machine, pool, frame, fspace, va, space):
                evicted += 1
            else:
                unevictable.add(frame.addr)
            if evicted >= n_pages:
                break
    if evicted:
        machine.metrics.add("evicted_pages", evicted)
    return Status.SUCCESS if evicted >= n_pages else Status.ERR_NOMEM


def _evict_one(machine, pool, frame, fspace, va, locked_space) -> bool:
    # The fault path already holds its own space's mutex (reentrant); a
    # frame backing some other space is skipped rather than risk a lock
    # cycle when that space is busy.
    if fspace is locked_space:
        locker = fspace.mutex
        locker.acquire()
    else:
        locker = fspace.mutex
        if not locker.acquire(blocking=False):
            return False
    try:
        entry = fspace.logical.get(va)
        if not isinstance(entry, Backed) or entry.wired:
            return False
        if entry.frame.page.addr != frame.addr:
            return False
        host = machine.host
        status, new_pa = migrate_page(fspace, va, entry, host.pool)
        if status is not Status.SUCCESS:
            return False
        if host in [d for d, _t, _m in fspace.attached]:
            table = host.table_for(fspace)
            table.map(va, new_pa, PAGE_SIZE, _region_prot(fspace, va))
            entry.holders = {host}
        else:
            fspace.logical.set(va, Swapped(new_pa))
        return True
    finally:
        locker.release()


def _region_prot(space, va):
    status, region = space.lookup(va)
    from .core import Prot

    return region.prot if status is Status.SUCCESS else Prot.RW


def migrate_page(space, va: int, entry: Backed, dst_pool: PhysMemPool):
    """Move one backed page into ``dst_pool``; returns (status, new PhysAddr).

    Copies the bytes, tears down every holder's translation with a
    shootdown, re-points the logical entry at the new frame (holders are
    cleared for the caller to re-establish), and frees the source frame.
    Direction counters grow by the page size according to the two pools.
    """
    machine = space.machine
    src_pa = entry.frame.page
    src_pool = machine.pools[src_pa.pool]
    if src_pool is dst_pool:
        return Status.ERR_INVALID_ARG, None
    status, pas = dst_pool.alloc(1)
    if status is not Status.SUCCESS:
        evict(dst_pool, EVICT_BATCH_MIN, space)
        status, pas = dst_pool.alloc(1)
        if status is not Status.SUCCESS:
            return Status.ERR_NOMEM, None
    dst_pa = pas[0]
    first, second = sorted((src_pool, dst_pool), key=lambda p: p.pool_id)
    with first._lock, second._lock:
        buf = src_pool.store.get(src_pa.addr)
        if buf is None:
            dst_pool.store.pop(dst_pa.addr, None)
        else:
            dst_pool.store[dst_pa.addr] = bytearray(buf)
    holders = set(entry.holders)
    tables = set()
    for dev in holders:
        table = dev.table_for(space)
        if table is not None and id(table) not in tables:
            tables.add(id(table))
            table.unmap(va, PAGE_SIZE)
    if holders:
        shootdown(machine.metrics, holders, [(va, va + PAGE_SIZE)])
    host_id = machine.host.id
    if src_pa.pool == host_id and dst_pa.pool != host_id:
        machine.metrics.add("host_to_dev_bytes", PAGE_SIZE)
    elif src_pa.pool != host_id and dst_pa.pool == host_id:
        machine.metrics.add("dev_to_host_bytes", PAGE_SIZE)
    machine.metrics.record_migration(src_pa.pool, dst_pa.pool, PAGE_SIZE)
    entry.frame = dst_pa
    entry.holders = set()
    dst_frame = dst_pool.frames[dst_pa.addr]
    dst_frame.backing = (space, va)
    dst_frame.tick = entry.tick
    src_pool.free_frames([src_pa.addr])
    return Status.SUCCESS, dst_pa
