"""Core domain types shared by every layer of the memory manager.

Defines status codes, tagged physical addresses, protection flags, device
capability and MMU descriptors, the device object itself, and the global
metrics sink. Higher layers (page tables, pools, address spaces) build on
these without this module importing any of them.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from enum import Enum, IntFlag
from typing import Any, Callable, NamedTuple, Optional

PAGE_SIZE = 4096
PAGE_SHIFT = 12
PAGE_MASK = PAGE_SIZE - 1
SUPERPAGE_SIZE = 2 * 1024 * 1024


def page_align_down(addr: int) -> int:
    return addr & ~PAGE_MASK


def page_align_up(addr: int) -> int:
    return (addr + PAGE_MASK) & ~PAGE_MASK


def is_pow2(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


class Status(Enum):
    """Return codes of every public operation.

    SUCCESS and RETRY_ACCESS are the only non-error codes; RETRY_ACCESS is
    produced only by fault handling and tells the device to retry the
    faulting access.
    """

    SUCCESS = 0
    ERR_NOMEM = 1
    ERR_INVALID_ARG = 2
    ERR_NOT_FOUND = 3
    ERR_PROTECTION = 4
    ERR_BUSY = 5
    ERR_UNSUPPORTED = 6
    ERR_DMA_FAULT = 7
    RETRY_ACCESS = 8

    @property
    def is_error(self) -> bool:
        return self not in (Status.SUCCESS, Status.RETRY_ACCESS)


class Prot(IntFlag):
    """Permitted access types for a virtual address."""

    NONE = 0
    READ = 1
    WRITE = 2
    RW = 3

    def allows(self, access: "Prot") -> bool:
        return (access & ~self) == Prot.NONE


class PhysAddr(NamedTuple):
    """A byte address tagged with the id of the pool it belongs to.

    ``pool`` is the owning device id (the host CPU device for host memory),
    so a translation always identifies which physical memory it refers to.
    """

    pool: int
    addr: int

    def offset(self, n: int) -> "PhysAddr":
        return PhysAddr(self.pool, self.addr + n)

    @property
    def page(self) -> "PhysAddr":
        return PhysAddr(self.pool, self.addr & ~PAGE_MASK)

    def __repr__(self) -> str:
        return f"PhysAddr(pool={self.pool}, addr={self.addr:#x})"


@dataclass(frozen=True)
class DeviceCaps:
    """Hardware capabilities a driver declares when creating a device.

    ``fault_recoverable=False`` means the device cannot recover from a
    translation fault, so everything it may touch must be wired before
    access.  ``supported_page_sizes`` must be powers of two >= 4KB with each
    larger size a multiple of the smaller ones.
    """

    fault_recoverable: bool = True
    has_local_memory: bool = False
    supported_page_sizes: tuple = (PAGE_SIZE,)

    def validate(self) -> Status:
        sizes = tuple(sorted(self.supported_page_sizes))
        if not sizes:
            return Status.ERR_INVALID_ARG
        for s in sizes:
            if not is_pow2(s) or s < PAGE_SIZE:
                return Status.ERR_INVALID_ARG
        for small, big in zip(sizes, sizes[1:]):
            if big % small != 0:
                return Status.ERR_INVALID_ARG
        return Status.SUCCESS


@dataclass
class MmuHooks:
    """Driver-provided operations; the manager reaches a device only through these.

    ``tlb_invalidate_range(dev, ranges)`` drops cached translations
    overlapping the given [start, end) ranges and returns how many entries
    were removed.  ``page_zero(pool, addrs)`` zeroes the given frames in the
    device's local memory.  ``pte_install``/``pte_destroy`` are notified
    after the manager edits a page-table entry on the device's behalf.
    """

    pte_install: Callable[..., None]
    pte_destroy: Callable[..., None]
    tlb_invalidate_range: Callable[..., int]
    page_zero: Callable[..., None]

    def is_total(self) -> bool:
        return all(
            callable(h)
            for h in (
                self.pte_install,
                self.pte_destroy,
                self.tlb_invalidate_range,
                self.page_zero,
            )
        )

    @staticmethod
    def default() -> "MmuHooks":
        """Hooks for a simulated device: TLB and frame store do the real work."""
        stats = {"pte_install": 0, "pte_destroy": 0}

        def pte_install(va, pa, size, prot):
            stats["pte_install"] += 1

        def pte_destroy(va, size):
            stats["pte_destroy"] += 1

        def tlb_invalidate_range(dev, ranges):
            if dev.tlb is None:
                return 0
            return dev.tlb.invalidate_ranges(ranges)

        def page_zero(pool, addrs):
            pool.zero_frames(addrs)

        hooks = MmuHooks(pte_install, pte_destroy, tlb_invalidate_range, page_zero)
        hooks.stats = stats
        return hooks


@dataclass
class MmuDescriptor:
    """Identifies a device's page-table format and bundles its hooks.

    Two devices may share one page table only when their ``format_id``
    values are equal.  ``data`` is an opaque handle stored for the driver;
    for the host CPU device it may name an address space whose mappings are
    inherited on attach.
    """

    format_id: int
    hooks: MmuHooks
    data: Any = None


class Device:
    """A registered device: its MMU, capabilities, optional local pool, TLB.

    A device may be attached to many address spaces but is active in at
    most one at a time; simulated accesses translate in the active space.
    """

    def __init__(self, dev_id: int, mmu: MmuDescriptor, caps: DeviceCaps, machine):
        self.id = dev_id
        self.mmu = mmu
        self.caps = caps
        self.machine = machine
        self.pool = None            # PhysMemPool once registered
        self.tlb = None             # TlbModel, assigned at creation
        self.active_as = None
        self.attachments = {}       # AddressSpace -> (PageTable, AttachMode)
        self.prep_granularity = PAGE_SIZE
        self.destroyed = False
        self._lock = threading.Lock()
        self._inflight = 0

    @property
    def is_host(self) -> bool:
        return self.machine is not None and self.machine.host is self

    def table_for(self, space):
        entry = self.attachments.get(space)
        return entry[0] if entry else None

    def mode_for(self, space):
        entry = self.attachments.get(space)
        return entry[1] if entry else None

    def begin_access(self):
        with self._lock:
            self._inflight += 1

    def end_access(self):
        with self._lock:
            self._inflight -= 1

    @property
    def busy(self) -> bool:
        return self._inflight > 0

    def switch(self, space) -> Status:
        """Activate this device within ``space`` (gm-style dev_switch)."""
        if space not in self.attachments:
            return Status.ERR_NOT_FOUND
        old = self.active_as
        if old is space:
            return Status.SUCCESS
        if old is not None and old.asyncq.pending_count() > 0:
            # Pending deferred unmaps still reference the old space; the
            # caller must synchronize first.
            return Status.ERR_BUSY
        self.active_as = space
        return Status.SUCCESS

    def detach(self, space) -> Status:
        from . import vaspace

        return vaspace.detach_device(space, self)

    def __repr__(self) -> str:
        kind = "host" if self.is_host else "dev"
        return f"<Device {kind}#{self.id} fmt={self.mmu.format_id}>"


class Metrics:
    """Global monotonic counters plus the live page-table node gauge.

    ``pt_nodes_current`` is the only field allowed to decrease.  When
    ``track_events`` is set, every migration appends ``(src_pool, dst_pool,
    nbytes)`` to ``migration_events`` so tests can check conservation.
    """

    COUNTERS = (
        "zero_fill_bytes",
        "host_to_dev_bytes",
        "dev_to_host_bytes",
        "dev_faults",
        "cpu_faults",
        "tlb_invalidation_broadcasts",
        "tlb_entries_invalidated",
        "pt_nodes_current",
        "pt_nodes_peak",
        "evicted_pages",
    )

    def __init__(self, track_events: bool = True):
        self._lock = threading.Lock()
        for name in self.COUNTERS:
            setattr(self, name, 0)
        self.track_events = track_events
        self.migration_events = []

    def add(self, name: str, n: int = 1) -> None:
        with self._lock:
            setattr(self, name, getattr(self, name) + n)

    def node_alloc(self, n: int = 1) -> None:
        with self._lock:
            self.pt_nodes_current += n
            if self.pt_nodes_current > self.pt_nodes_peak:
                self.pt_nodes_peak = self.pt_nodes_current

    def node_free(self, n: int = 1) -> None:
        with self._lock:
            self.pt_nodes_current -= n

    def record_migration(self, src_pool: int, dst_pool: int, nbytes: int) -> None:
        with self._lock:
            if self.track_events:
                self.migration_events.append((src_pool, dst_pool, nbytes))

    def snapshot(self) -> dict:
        with self._lock:
            return {name: getattr(self, name) for name in self.COUNTERS}
