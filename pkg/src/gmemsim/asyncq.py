"""Per-address-space asynchronous MMU operation queue.

Deferred unmaps are appended here with their page-table leaves already
cleared and their frames quarantined.  A flush coalesces the pending
invalidations into one hook call per distinct TLB, releases the quarantined
frames back to their pools, and only then fires the callbacks in enqueue
order.  Frames therefore never become re-allocatable while some TLB may
still cache a translation to them.
"""

from __future__ import annotations

import threading
from collections import deque
from dataclasses import dataclass, field
from enum import Enum, auto
from typing import Callable, Optional

from .core import Metrics, Status

DEFAULT_BATCH = 64
DEFAULT_FLUSH_INTERVAL = 256


class OpKind(Enum):
    UNMAP_RANGE = auto()
    # Completion notice for a wired mapping created with the ASYNC flag;
    # the installation itself already happened synchronously.
    MAP_NOTIFY = auto()


@dataclass
class AsyncOp:
    kind: OpKind
    ranges: list = field(default_factory=list)        # [(start, end)), ...]
    holders: list = field(default_factory=list)       # devices to invalidate
    frames: list = field(default_factory=list)        # [(pool, [addr, ...]), ...]
    callback: Optional[Callable] = None
    cb_arg: object = None
    enqueue_tick: int = 0


class AsyncQueue:
    def __init__(self, metrics: Metrics, batch_size: int = DEFAULT_BATCH,
                 flush_interval: int = DEFAULT_FLUSH_INTERVAL):
        self.batch_size = batch_size
        self.flush_interval = flush_interval
        self.metrics = metrics
        self.clock = 0
        self._pending = deque()
        self._quarantined = set()          # (pool_id, addr)
        self._lock = threading.Lock()
        self._flush_lock = threading.RLock()
        self._flushing = threading.local()

    def pending_count(self) -> int:
        with self._lock:
            return len(self._pending)

    def quarantined(self) -> set:
        """Snapshot of (pool_id, frame addr) pairs awaiting their broadcast."""
        with self._lock:
            return set(self._quarantined)

    def covers(self, va: int) -> bool:
        if not self._pending:
            return False
        with self._lock:
            return any(
                start <= va < end
                for op in self._pending
                for start, end in op.ranges
            )

    def enqueue_unmap(self, ranges, holders, frames, callback=None,
                      cb_arg=None) -> Status:
        with self._lock:
            op = AsyncOp(OpKind.UNMAP_RANGE, list(ranges), list(holders),
                         list(frames), callback, cb_arg, self.clock)
            self._pending.append(op)
            for pool, addrs in frames:
                for addr in addrs:
                    self._quarantined.add((pool.pool_id, addr))
            trigger = len(self._pending) >= self.batch_size
        if trigger:
            self.flush()
        return Status.SUCCESS

    def enqueue_notify(self, callback, cb_arg=None) -> Status:
        with self._lock:
            self._pending.append(
                AsyncOp(OpKind.MAP_NOTIFY, callback=callback, cb_arg=cb_arg,
                        enqueue_tick=self.clock))
            trigger = len(self._pending) >= self.batch_size
        if trigger:
            self.flush()
        return Status.SUCCESS

    def flush(self) -> Status:
        """Drain every pending op: broadcast, release frames, fire callbacks.

        Callbacks run on the flushing agent and must not re-enter this
        queue's flush; a nested call returns immediately and the outer loop
        picks up anything the callback enqueued.
        """
        if getattr(self._flushing, "active", False):
            return Status.SUCCESS
        with self._flush_lock:
            self._flushing.active = True
            try:
                while True:
                    with self._lock:
                        batch = list(self._pending)
                        self._pending.clear()
                    if not batch:
                        return Status.SUCCESS
                    self._complete(batch)
            finally:
                self._flushing.active = False

    def _complete(self, batch) -> None:
        from .pagetable import shootdown

        # One coalesced invalidation per distinct TLB across the batch.
        per_dev = {}
        for op in batch:
            for dev in op.holders:
                per_dev.setdefault(id(dev), (dev, []))[1].extend(op.ranges)
        for dev, ranges in per_dev.values():
            shootdown(self.metrics, [dev], _merge_ranges(ranges))
        # Broadcasts are done: quarantined frames may circulate again.
        for op in batch:
            for pool, addrs in op.frames:
                with self._lock:
                    for addr in addrs:
                        self._quarantined.discard((pool.pool_id, addr))
                pool.free_frames(addrs)
        for op in batch:
            if op.callback is not None:
                op.callback(op.cb_arg)

    def tick(self) -> Status:
        """Advance the queue clock; flush once the oldest op is overdue."""
        with self._lock:
            self.clock += 1
            overdue = (
                self._pending
                and self.clock - self._pending[0].enqueue_tick >= self.flush_interval
            )
        if overdue:
            self.flush()
        return Status.SUCCESS

    def drain_for_page(self, va: int) -> None:
        """Complete any pending op covering ``va`` before a fault proceeds."""
        if self.covers(va):
            self.flush()


def _merge_ranges(ranges):
    """Collapse adjacent/overlapping ranges; disjoint ones stay a list."""
    if not ranges:
        return []
    merged = []
    for start, end in sorted(ranges):
        if merged and start <= merged[-1][1]:
            merged[-1][1] = max(merged[-1][1], end)
        else:
            merged.append([start, end])
    return [(s, e) for s, e in merged]
