"""Logical page table: per-page backing state and the wired-mapping operations.

Each base page inside an allocated region is either unbacked (zero-fill on
first touch), backed by a specific frame together with the set of devices
whose page tables map it, or swapped out to a host frame nobody maps.  The
wired-mapping operations here (map/unmap and mapping sets) keep every
attached device's table in line with this one coordination structure.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

from .core import PAGE_SIZE, SUPERPAGE_SIZE, PhysAddr, Prot, Status, page_align_down
from .pagetable import shootdown


class ZeroFill:
    """Backing state of a page never touched: zero-filled on first fault."""

    __slots__ = ()

    def __repr__(self):
        return "<unbacked/zero-fill>"


UNBACKED = ZeroFill()


@dataclass
class Backed:
    frame: PhysAddr
    holders: set = field(default_factory=set)   # devices mapping this page
    wired: bool = False
    tick: int = 0


@dataclass
class Swapped:
    host_frame: PhysAddr


class LogicalPageTable:
    """Sparse map from base-page virtual address to backing state."""

    def __init__(self):
        self.entries = {}

    def get(self, page: int):
        return self.entries.get(page)

    def set(self, page: int, entry) -> None:
        self.entries[page] = entry

    def clear(self, page: int) -> None:
        self.entries.pop(page, None)

    def pages_in(self, start: int, end: int):
        return [p for p in range(start, end, PAGE_SIZE) if p in self.entries]

    def __len__(self):
        return len(self.entries)


class MappingSet:
    """Regions a driver considers logically related, unmapped as one unit."""

    def __init__(self):
        self.regions = []
        self._lock = threading.Lock()

    def add(self, region) -> None:
        with self._lock:
            if region not in self.regions:
                self.regions.append(region)
                region.member_of.append(self)

    def discard(self, region) -> None:
        with self._lock:
            if region in self.regions:
                self.regions.remove(region)
        if self in region.member_of:
            region.member_of.remove(self)

    def members(self):
        with self._lock:
            return list(self.regions)


def logical_lookup(space, va: int):
    """Backing state of the page holding ``va``; the page must lie in a region.

    Returns (status, entry) where entry is UNBACKED, a Backed, or a Swapped.
    """
    status, _region = space.lookup(va)
    if status.is_error:
        return Status.ERR_NOT_FOUND, None
    entry = space.logical.get(page_align_down(va))
    return Status.SUCCESS, entry if entry is not None else UNBACKED


def region_map(region, prot: Prot, frames, mapping_set: MappingSet = None,
               page_size: int = PAGE_SIZE, async_: bool = False,
               callback=None, cb_arg=None) -> Status:
    """Create a wired mapping from the region to caller-owned frames.

    ``frames`` holds one PhysAddr per ``page_size`` chunk and must cover the
    region exactly.  The translations are installed in the table of every
    attached device (wired mappings are the replication set for devices that
    cannot fault), the frames are wired in their pools, and the logical
    entries become backed-and-wired.  With ``async_`` the completion notice
    is delivered through the callback at the next queue flush.
    """
    space = region.space
    if page_size not in (PAGE_SIZE, SUPERPAGE_SIZE):
        return Status.ERR_INVALID_ARG
    if not region.prot.allows(prot):
        return Status.ERR_PROTECTION
    if region.start % page_size or region.size % page_size:
        return Status.ERR_INVALID_ARG
    if len(frames) != region.size // page_size:
        return Status.ERR_INVALID_ARG
    if any(f.addr % page_size for f in frames):
        return Status.ERR_INVALID_ARG
    with space.mutex:
        if region.mapped:
            return Status.ERR_INVALID_ARG
        holders = [dev for dev, _t, _m in space.attached]
        tables = {}
        for dev, table, _mode in space.attached:
            tables[id(table)] = (table, dev)
        for idx, frame in enumerate(frames):
            va = region.start + idx * page_size
            for table, dev in tables.values():
                if page_size in dev.caps.supported_page_sizes:
                    table.map(va, frame, page_size, prot)
                else:
                    for off in range(0, page_size, PAGE_SIZE):
                        table.map(va + off, frame.offset(off), PAGE_SIZE, prot)
            for off in range(0, page_size, PAGE_SIZE):
                space.logical.set(va + off, Backed(
                    frame.offset(off), set(holders), wired=True,
                    tick=space.machine.next_tick()))
        for frame in frames:
            pool = space.machine.pool_of(frame)
            pool.wire_frames(_expand(frame, page_size))
        region.mapped = True
        region.wired_frames = list(frames)
        region.wired_page_size = page_size
        region.wired_prot = prot
        if mapping_set is not None:
            mapping_set.add(region)
    if async_:
        space.asyncq.enqueue_notify(callback, cb_arg)
    elif callback is not None:
        callback(cb_arg)
    return Status.SUCCESS


def region_unmap(region, async_: bool = False, callback=None,
                 cb_arg=None) -> Status:
    """Destroy the region's wired mapping on every holder.

    Synchronous unmaps issue the TLB shootdowns before returning and leave
    the unwired frames to the caller.  Asynchronous unmaps clear the
    page-table leaves now but quarantine the frames in the space's queue:
    the invalidation broadcast is coalesced with others and the frames are
    released to their pools only once it has completed.
    """
    space = region.space
    with space.mutex:
        if not region.mapped:
            return Status.ERR_NOT_FOUND
        page_size = region.wired_page_size
        frames = region.wired_frames
        holder_devs = set()
        tables = {}
        for dev, table, _mode in space.attached:
            tables[id(table)] = (table, dev)
        for idx, frame in enumerate(frames):
            va = region.start + idx * page_size
            for table, dev in tables.values():
                if page_size in dev.caps.supported_page_sizes:
                    table.unmap(va, page_size)
                else:
                    for off in range(0, page_size, PAGE_SIZE):
                        table.unmap(va + off, PAGE_SIZE)
            for off in range(0, page_size, PAGE_SIZE):
                entry = space.logical.get(va + off)
                if isinstance(entry, Backed):
                    holder_devs.update(entry.holders)
                space.logical.clear(va + off)
        by_pool = {}
        for frame in frames:
            pool = space.machine.pool_of(frame)
            addrs = _expand(frame, page_size)
            pool.unwire_frames(addrs)
            by_pool.setdefault(pool.pool_id, (pool, []))[1].extend(addrs)
        region.mapped = False
        region.wired_frames = []
        span = (region.start, region.end)
    if async_:
        space.asyncq.enqueue_unmap(
            [span], holder_devs, list(by_pool.values()), callback, cb_arg)
    else:
        shootdown(space.machine.metrics, holder_devs, [span])
        if callback is not None:
            callback(cb_arg)
    return Status.SUCCESS


def mapping_set_unmap(mapping_set: MappingSet, async_: bool = False,
                      callback=None, cb_arg=None) -> Status:
    """Unmap every member; one completion notice after the last is destroyed."""
    members = [r for r in mapping_set.members() if r.mapped]
    if not members:
        if callback is not None:
            callback(cb_arg)
        return Status.SUCCESS
    if not async_:
        for region in members:
            region_unmap(region)
        if callback is not None:
            callback(cb_arg)
        return Status.SUCCESS
    remaining = {"n": len(members)}

    def one_done(_arg):
        remaining["n"] -= 1
        if remaining["n"] == 0 and callback is not None:
            callback(cb_arg)

    for region in members:
        region_unmap(region, async_=True, callback=one_done)
    return Status.SUCCESS


def _expand(frame: PhysAddr, page_size: int):
    return [frame.addr + off for off in range(0, page_size, PAGE_SIZE)]
