"""Virtual address spaces: region allocation, attachment, and lifecycle.

Regions are kept in an ordered index and allocated first-fit with optional
guard pages and an idle-region cache.  All attached devices observe the
same region set; per-device page tables are resolved at attach time by the
shared/coherent rules.
"""

from __future__ import annotations

import threading
from bisect import bisect_right, insort
from collections import deque
from dataclasses import dataclass
from enum import Enum, IntFlag, auto
from typing import Optional

from .core import PAGE_SIZE, Prot, Status, is_pow2
from .asyncq import AsyncQueue
from .logmap import Backed, LogicalPageTable, Swapped, region_map, region_unmap
from .pagetable import resolve_attach_table, shootdown
from .physmem import migrate_page

IDLE_CACHE_CAPACITY = 64
GUARD_PAGES = 1


class AllocPolicy(IntFlag):
    FIRST_FIT = 1
    GUARDED = 2
    CACHED = 4


class AttachMode(Enum):
    SHARED = auto()
    COHERENT = auto()


class PlacementMode(Enum):
    UNIQUE = auto()
    REPLICATE_REMOTE = auto()


@dataclass
class Placement:
    pinned_device: Optional[object] = None
    mode: PlacementMode = PlacementMode.UNIQUE


class Region:
    """An allocated span of virtual addresses within one space."""

    def __init__(self, space: "AddressSpace", start: int, size: int):
        self.space = space
        self.start = start
        self.size = size
        self.prot = Prot.RW
        self.placement = Placement()
        self.mapped = False
        self.wired_frames = []
        self.wired_page_size = PAGE_SIZE
        self.wired_prot = Prot.RW
        self.idle = False
        self.member_of = []     # MappingSets containing this region
        self.live = True

    @property
    def end(self) -> int:
        return self.start + self.size

    def contains(self, addr: int) -> bool:
        return self.start <= addr < self.end

    def map(self, prot, frames, mapping_set=None, page_size=PAGE_SIZE,
            async_=False, callback=None, cb_arg=None) -> Status:
        return region_map(self, prot, frames, mapping_set, page_size,
                          async_, callback, cb_arg)

    def unmap(self, async_=False, callback=None, cb_arg=None) -> Status:
        return region_unmap(self, async_, callback, cb_arg)

    def dealloc(self) -> Status:
        return self.space.dealloc(self)

    def set_policy(self, dev, mode: PlacementMode) -> Status:
        """Direct where future faults on this region place physical memory."""
        with self.space.mutex:
            if not self.live or self.idle:
                return Status.ERR_NOT_FOUND
            if dev is not None and dev not in [d for d, _t, _m in self.space.attached]:
                return Status.ERR_NOT_FOUND
            self.placement = Placement(dev, mode)
        return Status.SUCCESS

    def __repr__(self) -> str:
        return f"<Region [{self.start:#x}, {self.end:#x}) {'idle' if self.idle else 'live'}>"


class AddressSpace:
    def __init__(self, machine, begin: int, end: int, policy: AllocPolicy):
        self.machine = machine
        self.begin = begin
        self.end = end
        self.policy = policy
        self.logical = LogicalPageTable()
        self.asyncq = AsyncQueue(machine.metrics)
        self.attached = []          # [(device, table, mode)]
        self.mutex = threading.RLock()
        self.destroyed = False
        self._starts = []           # sorted region start addresses
        self._regions = {}          # start -> Region
        self.idle_cache = deque()   # parked idle regions, newest at the right
        self.cache_hits = 0
        self.active_faults = 0

    # -- region index ----------------------------------------------------

    def regions(self, include_idle: bool = False):
        with self.mutex:
            out = [self._regions[s] for s in self._starts]
        if include_idle:
            return out
        return [r for r in out if not r.idle]

    def _insert_region(self, region: Region) -> None:
        insort(self._starts, region.start)
        self._regions[region.start] = region

    def _remove_region(self, region: Region) -> None:
        i = bisect_right(self._starts, region.start) - 1
        if i >= 0 and self._starts[i] == region.start:
            del self._starts[i]
        del self._regions[region.start]

    def lookup(self, addr: int):
        """Find the region containing ``addr``; (status, region)."""
        with self.mutex:
            i = bisect_right(self._starts, addr) - 1
            if i >= 0:
                region = self._regions[self._starts[i]]
                if region.contains(addr) and not region.idle:
                    return Status.SUCCESS, region
            return Status.ERR_NOT_FOUND, None

    # -- allocation --------------------------------------------------------

    def alloc(self, hint: int = 0, size: int = 0, align: int = 0,
              no_cross: int = 0, max_va: int = 0):
        """First-fit allocation honoring alignment, boundary, and cap constraints.

        The search starts at the lowest free address >= hint and wraps once
        to the space start.  Under GUARDED every region keeps an unallocated
        base page on both sides; under CACHED an idle region of matching
        size and constraints is reused before searching.

        Returns (status, region).
        """
        if size <= 0 or size % PAGE_SIZE:
            return Status.ERR_INVALID_ARG, None
        if align == 0:
            align = PAGE_SIZE
        if not is_pow2(align):
            return Status.ERR_INVALID_ARG, None
        align = max(align, PAGE_SIZE)
        if no_cross and (not is_pow2(no_cross) or no_cross < size):
            return Status.ERR_INVALID_ARG, None
        limit = self.end if max_va == 0 else max_va
        if limit > self.end or limit <= self.begin:
            return Status.ERR_INVALID_ARG, None
        with self.mutex:
            if self.destroyed:
                return Status.ERR_NOT_FOUND, None
            if self.policy & AllocPolicy.CACHED:
                region = self._cache_take(size, align, no_cross, limit)
                if region is not None:
                    self.cache_hits += 1
                    return Status.SUCCESS, region
            start = self._find_first_fit(hint, size, align, no_cross, limit)
            if start is None:
                return Status.ERR_NOMEM, None
            region = Region(self, start, size)
            self._insert_region(region)
            return Status.SUCCESS, region

    def _gaps(self):
        """Free [lo, hi) spans between occupied regions (idle ones included)."""
        lo = self.begin
        for start in self._starts:
            region = self._regions[start]
            if start > lo:
                yield lo, start
            lo = max(lo, region.end)
        if lo < self.end:
            yield lo, self.end

    def _candidates_in_gap(self, gap_lo, gap_hi, pass_lo, size, align,
                           no_cross, limit):
        # Guard pages narrow the usable window relative to the gap edges
        # (neighbouring regions or the space bounds), not to the hint.
        guard = GUARD_PAGES * PAGE_SIZE if self.policy & AllocPolicy.GUARDED else 0
        lo = max(gap_lo + guard, pass_lo)
        hi = min(gap_hi - guard, limit)
        start = (lo + align - 1) & ~(align - 1)
        while start + size <= hi:
            if no_cross:
                boundary = (start // no_cross + 1) * no_cross
                if boundary < start + size:
                    nxt = (boundary + align - 1) & ~(align - 1)
                    if nxt <= start:
                        return None
                    start = nxt
                    continue
            return start
        return None

    def _find_first_fit(self, hint, size, align, no_cross, limit):
        for pass_lo in (max(hint, self.begin), self.begin):
            for gap_lo, gap_hi in self._gaps():
                if gap_hi <= pass_lo:
                    continue
                start = self._candidates_in_gap(
                    gap_lo, gap_hi, pass_lo, size, align, no_cross, limit)
                if start is not None:
                    return start
            if hint <= self.begin:
                break
        return None

    def _cache_take(self, size, align, no_cross, limit):
        for i in range(len(self.idle_cache) - 1, -1, -1):
            region = self.idle_cache[i]
            if region.size != size or region.start % align:
                continue
            if region.end > limit:
                continue
            if no_cross:
                boundary = (region.start // no_cross + 1) * no_cross
                if boundary < region.end:
                    continue
            del self.idle_cache[i]
            region.idle = False
            region.prot = Prot.RW
            region.placement = Placement()
            return region
        return None

    # -- deallocation --------------------------------------------------------

    def dealloc(self, region: Region) -> Status:
        """Free a region: unmap whatever is mapped, release backing frames.

        Under the CACHED policy the emptied region is parked in the idle
        cache instead of being removed from the index.
        """
        with self.mutex:
            if not region.live or region.idle or region.space is not self:
                return Status.ERR_NOT_FOUND
            if region.mapped:
                # Wired mapping: synchronous unmap, then the frames (which
                # this region's creator handed over) go back to their pools.
                frames = list(region.wired_frames)
                page_size = region.wired_page_size
                region_unmap(region)
                for frame in frames:
                    pool = self.machine.pool_of(frame)
                    pool.free_frames(
                        [frame.addr + off for off in range(0, page_size, PAGE_SIZE)])
            self._drop_backing(region.start, region.end)
            for mset in list(region.member_of):
                mset.discard(region)
            if self.policy & AllocPolicy.CACHED:
                region.idle = True
                self.idle_cache.append(region)
                if len(self.idle_cache) > IDLE_CACHE_CAPACITY:
                    oldest = self.idle_cache.popleft()
                    oldest.live = False
                    self._remove_region(oldest)
            else:
                region.live = False
                self._remove_region(region)
            return Status.SUCCESS

    def _drop_backing(self, start: int, end: int) -> None:
        """Clear fault-established entries in [start, end), freeing frames."""
        pages = self.logical.pages_in(start, end)
        holders = set()
        for page in pages:
            entry = self.logical.get(page)
            if isinstance(entry, Backed):
                holders.update(entry.holders)
                tables = set()
                for dev in entry.holders:
                    table = dev.table_for(self)
                    if table is not None and id(table) not in tables:
                        tables.add(id(table))
                        table.unmap(page, PAGE_SIZE)
                pool = self.machine.pools.get(entry.frame.pool)
                if pool is not None:
                    pool.free_frames([entry.frame.page.addr])
            elif isinstance(entry, Swapped):
                pool = self.machine.pools.get(entry.host_frame.pool)
                if pool is not None:
                    pool.free_frames([entry.host_frame.page.addr])
            self.logical.clear(page)
        if holders:
            shootdown(self.machine.metrics, holders, [(start, end)])

    # -- attachment --------------------------------------------------------

    def attach(self, dev, mode: AttachMode = AttachMode.COHERENT,
               activate: bool = False) -> Status:
        """Attach a device; resolves its page table per the sharing rules.

        Attaching the host CPU device whose MMU data names another address
        space inherits that space's regions and backing state.  Attaching a
        non-fault-recoverable device replicates the existing wired mappings
        into its fresh table.
        """
        with self.mutex:
            if self.destroyed:
                return Status.ERR_NOT_FOUND
            if dev in [d for d, _t, _m in self.attached]:
                return Status.ERR_INVALID_ARG
            table = resolve_attach_table(self, dev, mode)
            self.attached.append((dev, table, mode))
            dev.attachments[self] = (table, mode)
            if dev.is_host and isinstance(dev.mmu.data, AddressSpace):
                self._inherit_from(dev.mmu.data, dev, table)
            if not dev.caps.fault_recoverable:
                self._replicate_wired(dev, table)
        if activate:
            return dev.switch(self)
        return Status.SUCCESS

    def _replicate_wired(self, dev, table) -> None:
        for page, entry in sorted(self.logical.entries.items()):
            if isinstance(entry, Backed) and entry.wired:
                table.map(page, entry.frame, PAGE_SIZE, self._prot_at(page))
                entry.holders.add(dev)

    def _prot_at(self, va: int) -> Prot:
        status, region = self.lookup(va)
        return region.wired_prot if status is Status.SUCCESS and region.mapped \
            else (region.prot if status is Status.SUCCESS else Prot.RW)

    def _inherit_from(self, donor: "AddressSpace", host_dev, table) -> None:
        """Copy the donor's regions and backing state into this space.

        Backed donor pages are deep-copied into fresh host frames so the two
        spaces never alias physical memory.
        """
        host_pool = self.machine.host.pool
        with donor.mutex:
            for src in donor.regions():
                if src.end > self.end or src.start < self.begin:
                    continue
                region = Region(self, src.start, src.size)
                region.prot = src.prot
                region.placement = Placement(src.placement.pinned_device,
                                             src.placement.mode)
                self._insert_region(region)
                for page in range(src.start, src.end, PAGE_SIZE):
                    entry = donor.logical.get(page)
                    if entry is None:
                        continue
                    src_frame = entry.frame if isinstance(entry, Backed) \
                        else entry.host_frame
                    src_pool = self.machine.pools[src_frame.pool]
                    status, pas = host_pool.alloc(1)
                    if status is not Status.SUCCESS:
                        continue
                    data = src_pool.read(src_frame.page, PAGE_SIZE)
                    host_pool.write(pas[0], data)
                    new = Backed(pas[0], {host_dev}, wired=False,
                                 tick=self.machine.next_tick())
                    self.logical.set(page, new)
                    host_pool.frames[pas[0].addr].backing = (self, page)
                    table.map(page, pas[0], PAGE_SIZE, region.prot)

    # -- synchronize / destroy ----------------------------------------------

    def synchronize(self) -> Status:
        """Wait for pending asynchronous mapping changes to complete."""
        self.asyncq.flush()
        return Status.SUCCESS

    def destroy(self) -> Status:
        return self.machine.as_destroy(self)


def detach_device(space: AddressSpace, dev) -> Status:
    """Detach ``dev`` from ``space``: migrate its local pages home, then
    drop its table (or leave a shared table to the surviving sharers)."""
    with space.mutex:
        entry = dev.attachments.get(space)
        if entry is None:
            return Status.ERR_NOT_FOUND
        table, mode = entry
        space.synchronize()
        if dev.pool is not None:
            _migrate_pool_pages_home(space, dev)
        _drop_holder(space, dev)
        space.attached = [(d, t, m) for d, t, m in space.attached if d is not dev]
        del dev.attachments[space]
        table.sharers.discard(dev)
        if not table.sharers:
            table.destroy()
        if dev.tlb is not None:
            dev.tlb.invalidate_all()
        if dev.active_as is space:
            dev.active_as = None
    return Status.SUCCESS


def _migrate_pool_pages_home(space: AddressSpace, dev) -> None:
    host = space.machine.host
    pool_id = dev.pool.pool_id
    for page in sorted(space.logical.entries):
        entry = space.logical.get(page)
        if not isinstance(entry, Backed) or entry.frame.pool != pool_id:
            continue
        wired, prot = entry.wired, space._prot_at(page)
        old_holders = set(entry.holders)
        if wired:
            pool = space.machine.pools[pool_id]
            pool.unwire_frames([entry.frame.page.addr])
            entry.wired = False
        status, new_pa = migrate_page(space, page, entry, host.pool)
        if status is not Status.SUCCESS:
            continue
        entry.wired = wired
        if wired:
            host.pool.wire_frames([new_pa.addr])
            # Re-install for every remaining holder so wired coverage survives.
            for holder in old_holders:
                if holder is dev:
                    continue
                t = holder.table_for(space)
                if t is not None:
                    t.map(page, new_pa, PAGE_SIZE, prot)
                    entry.holders.add(holder)
        host_attached = host in [d for d, _t, _m in space.attached]
        if host_attached:
            if host not in entry.holders:
                host.table_for(space).map(page, new_pa, PAGE_SIZE, prot)
                entry.holders.add(host)
        elif not entry.holders and not wired:
            space.logical.set(page, Swapped(new_pa))


def _drop_holder(space: AddressSpace, dev) -> None:
    """Remove a departing device from holder sets, re-homing orphan pages."""
    host = space.machine.host
    for page in sorted(space.logical.entries):
        entry = space.logical.get(page)
        if not isinstance(entry, Backed) or dev not in entry.holders:
            continue
        entry.holders.discard(dev)
        if entry.holders or entry.wired:
            continue
        owner = space.machine.pools[entry.frame.pool].owner
        prot = space._prot_at(page)
        if owner in [d for d, _t, _m in space.attached] and owner is not dev:
            owner.table_for(space).map(page, entry.frame, PAGE_SIZE, prot)
            entry.holders.add(owner)
        elif entry.frame.pool == host.id:
            space.logical.set(page, Swapped(entry.frame))
        else:
            status, new_pa = migrate_page(space, page, entry, host.pool)
            if status is Status.SUCCESS:
                if host in [d for d, _t, _m in space.attached]:
                    host.table_for(space).map(page, new_pa, PAGE_SIZE, prot)
                    entry.holders.add(host)
                else:
                    space.logical.set(page, Swapped(new_pa))
