"""Multi-level radix page tables, the per-device TLB model, and shootdowns.

Tables are 4-level, 512-way, x86-64-like: 4KB leaves at level 1 and 2MB
leaves at level 2.  Node reference counts equal the number of non-empty
entries; a node is freed exactly when its count reaches zero during an
unmap.  Traversals run under a shared lock, node reclamation under the
exclusive lock, so mappings of disjoint ranges proceed concurrently while
no traversal can ever step through a freed node.
"""

from __future__ import annotations

import threading
from collections import OrderedDict
from typing import NamedTuple, Optional

from .core import PAGE_SIZE, PAGE_SHIFT, SUPERPAGE_SIZE, Metrics, PhysAddr, Prot, Status

LEVELS = 4
FANOUT = 512
INDEX_BITS = 9

# Leaf level per page size: 4KB entries live in level-1 nodes, 2MB in level-2.
LEAF_LEVEL = {PAGE_SIZE: 1, SUPERPAGE_SIZE: 2}


def level_index(va: int, level: int) -> int:
    return (va >> (PAGE_SHIFT + INDEX_BITS * (level - 1))) & (FANOUT - 1)


class Leaf(NamedTuple):
    pa: PhysAddr
    prot: Prot
    size: int


class RWLock:
    """Shared/exclusive lock; writers wait for all readers to drain."""

    def __init__(self):
        self._cond = threading.Condition()
        self._readers = 0
        self._writer = False

    def acquire_read(self):
        with self._cond:
            while self._writer:
                self._cond.wait()
            self._readers += 1

    def release_read(self):
        with self._cond:
            self._readers -= 1
            if self._readers == 0:
                self._cond.notify_all()

    def acquire_write(self):
        with self._cond:
            while self._writer or self._readers > 0:
                self._cond.wait()
            self._writer = True

    def release_write(self):
        with self._cond:
            self._writer = False
            self._cond.notify_all()


class PageTableNode:
    __slots__ = ("level", "entries")

    def __init__(self, level: int):
        self.level = level
        self.entries = {}  # slot -> PageTableNode | Leaf

    @property
    def refcount(self) -> int:
        return len(self.entries)


class PageTable:
    """One translation structure, possibly shared by devices of equal format."""

    def __init__(self, format_id: int, metrics: Metrics, hooks=None):
        self.format_id = format_id
        self.metrics = metrics
        self.hooks = hooks
        self.sharers = set()
        self.root: Optional[PageTableNode] = None
        self.node_count = 0
        self._rw = RWLock()
        self._mut = threading.Lock()

    def _new_node(self, level: int) -> PageTableNode:
        self.node_count += 1
        self.metrics.node_alloc()
        return PageTableNode(level)

    def _free_nodes(self, n: int) -> None:
        self.node_count -= n
        self.metrics.node_free(n)

    def map(self, va: int, pa: PhysAddr, size: int = PAGE_SIZE,
            prot: Prot = Prot.RW) -> Status:
        leaf_level = LEAF_LEVEL.get(size)
        if leaf_level is None or va % size or pa.addr % size:
            return Status.ERR_INVALID_ARG
        self._rw.acquire_read()
        try:
            with self._mut:
                if self.root is None:
                    self.root = self._new_node(LEVELS)
                node = self.root
                for level in range(LEVELS, leaf_level, -1):
                    slot = level_index(va, level)
                    nxt = node.entries.get(slot)
                    if nxt is None:
                        nxt = self._new_node(level - 1)
                        node.entries[slot] = nxt
                    elif isinstance(nxt, Leaf):
                        # A larger mapping already covers this range.
                        return Status.ERR_INVALID_ARG
                    node = nxt
                slot = level_index(va, leaf_level)
                cur = node.entries.get(slot)
                if isinstance(cur, PageTableNode):
                    return Status.ERR_INVALID_ARG
                node.entries[slot] = Leaf(pa, prot, size)
        finally:
            self._rw.release_read()
        if self.hooks is not None:
            self.hooks.pte_install(va, pa, size, prot)
        return Status.SUCCESS

    def unmap(self, va: int, size: int = PAGE_SIZE):
        """Clear the leaf at (va, size); returns (status, old physical address).

        Any node whose reference count drops to zero is unlinked and freed,
        cascading toward the root, under the exclusive lock.
        """
        leaf_level = LEAF_LEVEL.get(size)
        if leaf_level is None or va % size:
            return Status.ERR_INVALID_ARG, None
        old = None
        needs_prune = False
        self._rw.acquire_read()
        try:
            with self._mut:
                path = self._walk_path(va, leaf_level)
                if path is None:
                    return Status.ERR_NOT_FOUND, None
                node = path[-1][0]
                slot = level_index(va, leaf_level)
                leaf = node.entries.get(slot)
                if not isinstance(leaf, Leaf) or leaf.size != size:
                    return Status.ERR_NOT_FOUND, None
                old = leaf.pa
                del node.entries[slot]
                needs_prune = node.refcount == 0
        finally:
            self._rw.release_read()
        if self.hooks is not None:
            self.hooks.pte_destroy(va, size)
        if needs_prune:
            self._prune(va, leaf_level)
        return Status.SUCCESS, old

    def _walk_path(self, va: int, leaf_level: int):
        """Nodes from root down to the node holding the leaf slot, or None."""
        if self.root is None:
            return None
        path = [(self.root, LEVELS)]
        node = self.root
        for level in range(LEVELS, leaf_level, -1):
            nxt = node.entries.get(level_index(va, level))
            if not isinstance(nxt, PageTableNode):
                return None
            node = nxt
            path.append((node, level - 1))
        return path

    def _prune(self, va: int, leaf_level: int) -> None:
        self._rw.acquire_write()
        try:
            with self._mut:
                path = self._walk_path(va, leaf_level)
                if path is None:
                    return
                freed = 0
                # Free empty nodes bottom-up, unlinking each from its parent.
                for i in range(len(path) - 1, 0, -1):
                    node, _ = path[i]
                    if node.refcount != 0:
                        break
                    parent, plevel = path[i - 1]
                    del parent.entries[level_index(va, plevel)]
                    freed += 1
                if self.root is not None and self.root.refcount == 0:
                    self.root = None
                    freed += 1
                if freed:
                    self._free_nodes(freed)
        finally:
            self._rw.release_write()

    def lookup_leaf(self, va: int) -> Optional[Leaf]:
        """Walk without TLB or protection checks; None when unmapped."""
        self._rw.acquire_read()
        try:
            node = self.root
            level = LEVELS
            while node is not None:
                entry = node.entries.get(level_index(va, level))
                if entry is None:
                    return None
                if isinstance(entry, Leaf):
                    return entry
                node = entry
                level -= 1
            return None
        finally:
            self._rw.release_read()

    def translate(self, va: int, access: Prot, tlb: "TlbModel" = None):
        """Resolve va to a tagged physical address, consulting the TLB first.

        Returns (status, PhysAddr | None).  A protection violation never
        fills the TLB.
        """
        if tlb is not None:
            hit = tlb.lookup(va)
            if hit is not None:
                base, leaf = hit
                if not leaf.prot.allows(access):
                    return Status.ERR_PROTECTION, None
                return Status.SUCCESS, leaf.pa.offset(va - base)
        leaf = self.lookup_leaf(va)
        if leaf is None:
            return Status.ERR_NOT_FOUND, None
        base = va & ~(leaf.size - 1)
        if not leaf.prot.allows(access):
            return Status.ERR_PROTECTION, None
        if tlb is not None:
            tlb.fill(base, leaf)
        return Status.SUCCESS, leaf.pa.offset(va - base)

    def walk_leaves(self):
        """Yield (va, leaf) for every installed translation."""
        self._rw.acquire_read()
        try:
            if self.root is None:
                return
            stack = [(self.root, LEVELS, 0)]
            out = []
            while stack:
                node, level, base = stack.pop()
                shift = PAGE_SHIFT + INDEX_BITS * (level - 1)
                for slot, entry in node.entries.items():
                    va = base | (slot << shift)
                    if isinstance(entry, Leaf):
                        out.append((va, entry))
                    else:
                        stack.append((entry, level - 1, va))
        finally:
            self._rw.release_read()
        yield from sorted(out)

    def counted_nodes(self) -> int:
        """Independent node count by full walk (test oracle support)."""
        self._rw.acquire_read()
        try:
            if self.root is None:
                return 0
            n = 0
            stack = [self.root]
            while stack:
                node = stack.pop()
                n += 1
                for entry in node.entries.values():
                    if isinstance(entry, PageTableNode):
                        stack.append(entry)
            return n
        finally:
            self._rw.release_read()

    def destroy(self) -> None:
        """Free every node; the table object itself may be reused."""
        self._rw.acquire_write()
        try:
            with self._mut:
                n = 0
                stack = [self.root] if self.root is not None else []
                while stack:
                    node = stack.pop()
                    n += 1
                    for entry in node.entries.values():
                        if isinstance(entry, PageTableNode):
                            stack.append(entry)
                self.root = None
                if n:
                    self._free_nodes(n)
        finally:
            self._rw.release_write()


class TlbModel:
    """Per-device translation cache: FIFO replacement, fixed capacity.

    Entries are keyed by (page base, page size); an entry caches the leaf
    present in the owning table at fill time.
    """

    def __init__(self, capacity: int = 64, owner_id: int = -1):
        self.capacity = capacity
        self.owner_id = owner_id
        self.entries = OrderedDict()  # (base, size) -> Leaf
        self.hits = 0
        self.misses = 0
        self._lock = threading.Lock()

    def lookup(self, va: int):
        k4 = (va & ~(PAGE_SIZE - 1), PAGE_SIZE)
        k2 = (va & ~(SUPERPAGE_SIZE - 1), SUPERPAGE_SIZE)
        with self._lock:
            for key in (k4, k2):
                leaf = self.entries.get(key)
                if leaf is not None:
                    self.hits += 1
                    return key[0], leaf
            self.misses += 1
            return None

    def fill(self, base: int, leaf: Leaf) -> None:
        with self._lock:
            key = (base, leaf.size)
            if key not in self.entries and len(self.entries) >= self.capacity:
                self.entries.popitem(last=False)
            self.entries[key] = leaf

    def invalidate_ranges(self, ranges) -> int:
        """Drop every entry overlapping any [start, end) range; returns count."""
        with self._lock:
            if not self.entries:
                return 0
            dropped = 0
            scan = []
            for start, end in ranges:
                # Narrow ranges are cheaper by direct key probes than a scan.
                if (end - start) // PAGE_SIZE <= 16:
                    for page in range(start & ~(PAGE_SIZE - 1), end, PAGE_SIZE):
                        if self.entries.pop((page, PAGE_SIZE), None) is not None:
                            dropped += 1
                    first = start & ~(SUPERPAGE_SIZE - 1)
                    for super_base in range(first, end, SUPERPAGE_SIZE):
                        if self.entries.pop((super_base, SUPERPAGE_SIZE), None) is not None:
                            dropped += 1
                else:
                    scan.append((start, end))
            if scan:
                doomed = [
                    key
                    for key in self.entries
                    if any(key[0] < end and start < key[0] + key[1]
                           for start, end in scan)
                ]
                for key in doomed:
                    del self.entries[key]
                dropped += len(doomed)
            return dropped

    def invalidate_all(self) -> int:
        with self._lock:
            n = len(self.entries)
            self.entries.clear()
            return n

    def snapshot(self):
        with self._lock:
            return dict(self.entries)


def shootdown(metrics: Metrics, devices, ranges) -> Status:
    """Invalidate cached translations for ``ranges`` on every given device.

    One invalidation hook call per distinct TLB: sharers of one table still
    receive individual broadcasts because their TLBs are separate.
    """
    seen = set()
    for dev in devices:
        if id(dev) in seen:
            continue
        seen.add(id(dev))
        dropped = dev.mmu.hooks.tlb_invalidate_range(dev, ranges)
        metrics.add("tlb_invalidation_broadcasts", 1)
        if dropped:
            metrics.add("tlb_entries_invalidated", dropped)
    return Status.SUCCESS


def resolve_attach_table(space, dev, mode) -> PageTable:
    """Pick or create the page table a device uses within a space.

    A SHARED request joins the table of an already-attached device with the
    same format id; otherwise (or for COHERENT) a fresh per-device table is
    created.  Non-fault-recoverable devices always get their own table so
    that it only ever contains wired mappings.
    """
    from .vaspace import AttachMode

    if mode == AttachMode.SHARED and dev.caps.fault_recoverable:
        for other, table, _ in space.attached:
            if other.mmu.format_id == dev.mmu.format_id:
                table.sharers.add(dev)
                return table
    table = PageTable(dev.mmu.format_id, space.machine.metrics, hooks=dev.mmu.hooks)
    table.sharers.add(dev)
    return table
