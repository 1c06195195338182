"""The top-level manager instance: device registry, host CPU, metrics, clock.

One ``Gmem`` owns everything a run needs.  It is created with a predefined
host CPU device backed by an unbounded physical pool (host memory doubles
as the swap target for device memory), and hands out device ids and address
spaces from a serialized registry.
"""

from __future__ import annotations

import itertools
import threading

from .core import (
    PAGE_SIZE,
    SUPERPAGE_SIZE,
    Device,
    DeviceCaps,
    Metrics,
    MmuDescriptor,
    MmuHooks,
    PhysAddr,
    Status,
)
from .pagetable import TlbModel
from .physmem import PhysMemPool, register_physmem
from .vaspace import AddressSpace, AllocPolicy, detach_device

HOST_FORMAT_ID = 1
DEFAULT_TLB_CAPACITY = 64


class Gmem:
    def __init__(self, host_tlb_capacity: int = DEFAULT_TLB_CAPACITY,
                 track_events: bool = True):
        self.metrics = Metrics(track_events=track_events)
        self.pools = {}
        self._devices = {}
        self._spaces = set()
        self._ids = itertools.count()
        self._ticks = itertools.count(1)
        self._lock = threading.Lock()
        self.host = self._make_host(host_tlb_capacity)

    def _make_host(self, tlb_capacity: int):
        caps = DeviceCaps(fault_recoverable=True, has_local_memory=True,
                          supported_page_sizes=(PAGE_SIZE, SUPERPAGE_SIZE))
        mmu = MmuDescriptor(format_id=HOST_FORMAT_ID, hooks=MmuHooks.default())
        status, host = self.device_create(mmu, caps, tlb_capacity=tlb_capacity)
        assert status is Status.SUCCESS
        host.pool = PhysMemPool(host, 0, 0, unbounded=True)
        self.pools[host.id] = host.pool
        return host

    def next_tick(self) -> int:
        return next(self._ticks)

    # -- device lifecycle ---------------------------------------------------

    def device_create(self, mmu: MmuDescriptor, caps: DeviceCaps,
                      tlb_capacity: int = DEFAULT_TLB_CAPACITY):
        """Register a device; returns (status, device)."""
        if caps.validate() is not Status.SUCCESS:
            return Status.ERR_INVALID_ARG, None
        if mmu is None or mmu.hooks is None or not mmu.hooks.is_total():
            return Status.ERR_INVALID_ARG, None
        with self._lock:
            dev = Device(next(self._ids), mmu, caps, self)
            dev.tlb = TlbModel(tlb_capacity, owner_id=dev.id)
            self._devices[dev.id] = dev
        return Status.SUCCESS, dev

    def device_destroy(self, dev: Device) -> Status:
        """Tear a device down: detach everywhere, drain its pool, retire the id.

        Pages resident in the device's local memory are migrated to the host
        by each detach, so surviving devices keep a coherent view.
        """
        with self._lock:
            if dev.id not in self._devices:
                return Status.ERR_NOT_FOUND
        if dev.busy:
            return Status.ERR_BUSY
        for space in list(dev.attachments):
            detach_device(space, dev)
        if dev.pool is not None:
            pool = dev.pool
            with pool._lock:
                leftovers = list(pool.frames)
            if leftovers:
                pool.free_frames(leftovers)
            self.pools.pop(pool.pool_id, None)
            dev.pool = None
        with self._lock:
            del self._devices[dev.id]
        dev.destroyed = True
        return Status.SUCCESS

    def device_switch(self, dev: Device, space: AddressSpace) -> Status:
        return dev.switch(space)

    def device_detach(self, dev: Device, space: AddressSpace) -> Status:
        return detach_device(space, dev)

    def register_physmem(self, dev: Device, begin: int, end: int) -> Status:
        return register_physmem(dev, begin, end)

    def devices(self):
        with self._lock:
            return dict(self._devices)

    def pool_of(self, pa: PhysAddr) -> PhysMemPool:
        return self.pools[pa.pool]

    # -- address-space lifecycle ----------------------------------------------

    def as_create(self, begin: int, end: int,
                  policy: AllocPolicy = AllocPolicy.FIRST_FIT):
        """Create a virtual address space over [begin, end); (status, space)."""
        if begin >= end or begin % PAGE_SIZE or end % PAGE_SIZE:
            return Status.ERR_INVALID_ARG, None
        if not policy & AllocPolicy.FIRST_FIT:
            return Status.ERR_INVALID_ARG, None
        space = AddressSpace(self, begin, end, policy)
        with self._lock:
            self._spaces.add(space)
        return Status.SUCCESS, space

    def as_destroy(self, space: AddressSpace) -> Status:
        """Destroy a space: drain its queue, free every region, detach devices."""
        with self._lock:
            if space not in self._spaces:
                return Status.ERR_NOT_FOUND
        if space.active_faults > 0:
            return Status.ERR_BUSY
        with space.mutex:
            space.synchronize()
            for region in space.regions(include_idle=True):
                if not region.idle:
                    space.dealloc(region)
            for region in list(space.idle_cache):
                region.live = False
                space._remove_region(region)
            space.idle_cache.clear()
            for dev, _table, _mode in list(space.attached):
                detach_device(space, dev)
            space.destroyed = True
        with self._lock:
            self._spaces.discard(space)
        return Status.SUCCESS
