"""The unified page-fault engine for devices and the host CPU.

A fault resolves the region and protection, consults the logical page
table, and then either zero-fills a fresh granule, re-installs a missing
translation, replicates a remote mapping, or migrates the page to the
faulting device.  A successful fault returns RETRY_ACCESS: the very next
translation attempt for the same access is guaranteed to succeed.
"""

from __future__ import annotations

from .core import PAGE_SIZE, PhysAddr, Prot, Status, page_align_down
from .logmap import Backed, Swapped
from .physmem import alloc_with_evict, migrate_page, prepare_zero
from .vaspace import PlacementMode


def dev_fault(dev, va: int, access: Prot) -> Status:
    """Handle a translation fault raised by ``dev`` at ``va``.

    Only fault-recoverable devices may call this; accesses by devices that
    cannot recover fail as DMA faults before reaching the engine.
    """
    space = dev.active_as
    if space is None or not dev.caps.fault_recoverable:
        return Status.ERR_INVALID_ARG
    space.active_faults += 1
    try:
        with space.mutex:
            return _handle(space, dev, va, access)
    finally:
        space.active_faults -= 1


def host_fault(machine, va: int, access: Prot) -> Status:
    """The host-CPU fault path; identical algorithm with the host device."""
    return dev_fault(machine.host, va, access)


def _handle(space, dev, va: int, access: Prot) -> Status:
    machine = space.machine
    # A page with a deferred unmap in flight must complete it first, or the
    # new mapping would be wiped by the pending broadcast.
    space.asyncq.drain_for_page(va)
    status, region = space.lookup(va)
    if status.is_error:
        return Status.ERR_NOT_FOUND
    if not region.prot.allows(access):
        return Status.ERR_PROTECTION
    page = page_align_down(va)
    entry = space.logical.get(page)
    table = dev.table_for(space)
    if table is None:
        return Status.ERR_NOT_FOUND
    target_pool = _target_pool(machine, region, dev)

    if entry is None:
        status = _first_touch(space, dev, region, table, page, target_pool)
    elif isinstance(entry, Backed):
        status = _backed(space, dev, region, table, page, entry, target_pool)
    else:  # Swapped
        status = _swapped(space, dev, region, table, page, entry, target_pool)
    if status is not Status.SUCCESS:
        return status

    entry = space.logical.get(page)
    tick = machine.next_tick()
    entry.tick = tick
    machine.pools[entry.frame.pool].touch(entry.frame.page.addr, tick)
    machine.metrics.add("cpu_faults" if dev.is_host else "dev_faults")
    return Status.RETRY_ACCESS


def _target_pool(machine, region, dev):
    pinned = region.placement.pinned_device
    if pinned is not None and pinned.pool is not None:
        return pinned.pool
    if dev.pool is not None:
        return dev.pool
    return machine.host.pool


def _first_touch(space, dev, region, table, page, pool) -> Status:
    """Zero-fill first touch: prepare a whole granule around the fault.

    The granule is the faulting device's preparation granularity clipped to
    the region; neighbour pages already backed are skipped, shrinking the
    granule to its unbacked sub-runs.
    """
    granule = dev.prep_granularity
    gran_lo = page - (page % granule)
    lo = max(region.start, gran_lo)
    hi = min(region.end, gran_lo + granule)
    runs = _unbacked_runs(space, lo, hi)
    for run_lo, run_hi in runs:
        n = (run_hi - run_lo) // PAGE_SIZE
        align = granule if n * PAGE_SIZE == granule else PAGE_SIZE
        status, frames = alloc_with_evict(
            pool, n, contiguous=(n > 1), align=align, space=space)
        if status is not Status.SUCCESS:
            if run_lo <= page < run_hi:
                return status
            continue
        frame_objs = [pool.frames[pa.addr] for pa in frames]
        prepare_zero(pool, frame_objs, dev, granule)
        for i, pa in enumerate(frames):
            va = run_lo + i * PAGE_SIZE
            table.map(va, pa, PAGE_SIZE, region.prot)
            space.logical.set(va, Backed(pa, {dev}, wired=False,
                                         tick=space.machine.next_tick()))
            frame_objs[i].backing = (space, va)
    return Status.SUCCESS


def _unbacked_runs(space, lo: int, hi: int):
    runs = []
    run_start = None
    for va in range(lo, hi, PAGE_SIZE):
        if space.logical.get(va) is None:
            if run_start is None:
                run_start = va
        elif run_start is not None:
            runs.append((run_start, va))
            run_start = None
    if run_start is not None:
        runs.append((run_start, hi))
    return runs


def _backed(space, dev, region, table, page, entry: Backed, pool) -> Status:
    if dev in entry.holders:
        # Pure TLB or page-table inconsistency: refresh and retry.
        leaf = table.lookup_leaf(page)
        if leaf is None or not leaf.prot.allows(region.prot):
            table.map(page, entry.frame, PAGE_SIZE, region.prot)
        dev.tlb.invalidate_ranges([(page, page + PAGE_SIZE)])
        return Status.SUCCESS
    if entry.frame.pool == pool.pool_id or entry.wired or \
            region.placement.mode is PlacementMode.REPLICATE_REMOTE:
        # Remote access (or the frame already sits in the target pool, or it
        # is wired and must not move): just install the translation.
        table.map(page, entry.frame, PAGE_SIZE, region.prot)
        entry.holders.add(dev)
        return Status.SUCCESS
    # Second fault under UNIQUE hints at false locality: migrate it here.
    status, new_pa = migrate_page(space, page, entry, pool)
    if status is not Status.SUCCESS:
        return status
    table.map(page, new_pa, PAGE_SIZE, region.prot)
    entry.holders = {dev}
    return Status.SUCCESS


def _swapped(space, dev, region, table, page, entry: Swapped, pool) -> Status:
    carrier = Backed(entry.host_frame, set(), wired=False, tick=0)
    space.logical.set(page, carrier)
    if entry.host_frame.pool == pool.pool_id:
        new_pa = entry.host_frame
    else:
        status, new_pa = migrate_page(space, page, carrier, pool)
        if status is not Status.SUCCESS:
            space.logical.set(page, entry)
            return status
    table.map(page, new_pa, PAGE_SIZE, region.prot)
    carrier.frame = new_pa
    carrier.holders = {dev}
    return Status.SUCCESS
