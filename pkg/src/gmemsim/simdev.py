"""Simulated devices: access engines, compute kernels, and the DMA churn loop.

Every byte a simulated device touches goes through its MMU: translate in
the TLB/page table, fault-and-retry when the device can recover, or abort
with a DMA fault when it cannot.  The two compute kernels exercise the
memory system the way real accelerator workloads would: an exact 64-bit
vector addition and a three-layer back-propagation trainer in Q32.32 fixed
point, both bit-deterministic for a given seed.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from enum import Enum, auto
from typing import Optional

import numpy as np

from .core import (
    PAGE_SIZE,
    SUPERPAGE_SIZE,
    DeviceCaps,
    MmuDescriptor,
    MmuHooks,
    Prot,
    Status,
    page_align_down,
)
from .fault import dev_fault
from .machine import HOST_FORMAT_ID, Gmem
from .vaspace import AttachMode

MAX_FAULT_RETRIES = 4


class SimDeviceKind(Enum):
    INTEGRATED_GPU = auto()    # faultable, no local memory
    DISCRETE_GPU = auto()      # faultable, local memory pool
    DMA_DEVICE = auto()        # cannot recover from faults, wired-only


@dataclass
class SimDeviceConfig:
    kind: SimDeviceKind = SimDeviceKind.INTEGRATED_GPU
    local_mem_bytes: int = 0
    pt_mode: AttachMode = AttachMode.COHERENT
    prep_granularity: int = PAGE_SIZE
    format_id: int = HOST_FORMAT_ID
    tlb_capacity: int = 64
    page_sizes: tuple = (PAGE_SIZE, SUPERPAGE_SIZE)

    @property
    def fault_recoverable(self) -> bool:
        return self.kind is not SimDeviceKind.DMA_DEVICE


def make_sim_device(machine: Gmem, cfg: SimDeviceConfig):
    """Build and register a device per the config; returns (status, device)."""
    if cfg.prep_granularity not in cfg.page_sizes:
        return Status.ERR_INVALID_ARG, None
    if cfg.kind is SimDeviceKind.DISCRETE_GPU and cfg.local_mem_bytes <= 0:
        return Status.ERR_INVALID_ARG, None
    caps = DeviceCaps(
        fault_recoverable=cfg.fault_recoverable,
        has_local_memory=cfg.kind is SimDeviceKind.DISCRETE_GPU,
        supported_page_sizes=cfg.page_sizes,
    )
    mmu = MmuDescriptor(format_id=cfg.format_id, hooks=MmuHooks.default())
    status, dev = machine.device_create(mmu, caps, tlb_capacity=cfg.tlb_capacity)
    if status.is_error:
        return status, None
    dev.prep_granularity = cfg.prep_granularity
    if cfg.kind is SimDeviceKind.DISCRETE_GPU:
        size = (cfg.local_mem_bytes // PAGE_SIZE) * PAGE_SIZE
        base = 1 << 40  # arbitrary device-local physical base
        status = machine.register_physmem(dev, base, base + size)
        if status.is_error:
            return status, None
    return Status.SUCCESS, dev


class AccessEngine:
    """Sequential access stream of one device, with the fault-retry loop."""

    def __init__(self, dev, trace: Optional[list] = None):
        self.dev = dev
        self.trace = trace
        self.op_count = 0

    def _page_op(self, va: int, nbytes: int, write: bool, data: bytes = b""):
        dev = self.dev
        machine = dev.machine
        space = dev.active_as
        if space is None:
            return Status.ERR_INVALID_ARG, b""
        access = Prot.WRITE if write else Prot.READ
        table = dev.table_for(space)
        if table is None:
            return Status.ERR_NOT_FOUND, b""
        self.op_count += 1
        dev.begin_access()
        try:
            for _attempt in range(MAX_FAULT_RETRIES + 1):
                status, pa = table.translate(va, access, dev.tlb)
                if status is Status.SUCCESS:
                    pool = machine.pools[pa.pool]
                    if write:
                        pool.write(pa, data)
                        out = b""
                    else:
                        out = pool.read(pa, nbytes)
                    tick = machine.next_tick()
                    pool.touch(pa.addr & ~(PAGE_SIZE - 1), tick)
                    entry = space.logical.get(page_align_down(va))
                    if entry is not None and hasattr(entry, "tick"):
                        entry.tick = tick
                    self._record(va, write, Status.SUCCESS)
                    return Status.SUCCESS, out
                if not dev.caps.fault_recoverable:
                    self._record(va, write, Status.ERR_DMA_FAULT)
                    return Status.ERR_DMA_FAULT, b""
                status = dev_fault(dev, va, access)
                if status is not Status.RETRY_ACCESS:
                    self._record(va, write, status)
                    return status, b""
            self._record(va, write, Status.ERR_BUSY)
            return Status.ERR_BUSY, b""  # retry livelock guard
        finally:
            dev.end_access()

    def _record(self, va, write, outcome):
        if self.trace is not None:
            self.trace.append(
                (self.dev.id, va, "W" if write else "R", outcome.name))

    # -- public access helpers ------------------------------------------------

    def read(self, va: int, nbytes: int):
        """Read a byte range, split at page boundaries; (status, bytes)."""
        buf = bytearray(nbytes)
        pos = 0
        while pos < nbytes:
            in_page = min(nbytes - pos, PAGE_SIZE - (va & (PAGE_SIZE - 1)))
            status, data = self._page_op(va, in_page, write=False)
            if status is not Status.SUCCESS:
                return status, b""
            buf[pos:pos + in_page] = data
            va += in_page
            pos += in_page
        return Status.SUCCESS, bytes(buf)

    def write(self, va: int, data: bytes) -> Status:
        view = memoryview(data)
        while len(view) > 0:
            in_page = min(len(view), PAGE_SIZE - (va & (PAGE_SIZE - 1)))
            status, _ = self._page_op(va, in_page, write=True,
                                      data=bytes(view[:in_page]))
            if status is not Status.SUCCESS:
                return status
            va += in_page
            view = view[in_page:]
        return Status.SUCCESS

    def read_u64(self, va: int):
        status, data = self.read(va, 8)
        if status is not Status.SUCCESS:
            return status, 0
        return Status.SUCCESS, int.from_bytes(data, "little")

    def write_u64(self, va: int, value: int) -> Status:
        return self.write(va, (value & (2 ** 64 - 1)).to_bytes(8, "little"))


def sim_access(dev, va: int, write: bool, data: bytes = b"", nbytes: int = 8,
               trace=None):
    """One device access at ``va``: write ``data`` or read ``nbytes``."""
    engine = AccessEngine(dev, trace)
    if write:
        status = engine.write(va, data)
        return status, b""
    return engine.read(va, nbytes)


def check_tlb_consistency(devices) -> int:
    """Count TLB entries whose translation is absent from the owning table."""
    stale = 0
    for dev in devices:
        if dev.tlb is None or dev.active_as is None:
            continue
        table = dev.table_for(dev.active_as)
        if table is None:
            continue
        for (base, size), leaf in dev.tlb.snapshot().items():
            cur = table.lookup_leaf(base)
            if cur is None or cur.pa != leaf.pa or cur.size != size:
                stale += 1
    return stale


# -- VectorAdd ---------------------------------------------------------------

def run_kernel_vectoradd(dev, a_region, b_region, out_region, n: int,
                         trace=None) -> Status:
    """out[i] = a[i] + b[i] over 64-bit elements, one access per element."""
    for region in (a_region, b_region, out_region):
        if region.size < n * 8:
            return Status.ERR_INVALID_ARG
    engine = AccessEngine(dev, trace)
    for i in range(n):
        off = i * 8
        status, x = engine.read_u64(a_region.start + off)
        if status is not Status.SUCCESS:
            return status
        status, y = engine.read_u64(b_region.start + off)
        if status is not Status.SUCCESS:
            return status
        status = engine.write_u64(out_region.start + off, x + y)
        if status is not Status.SUCCESS:
            return status
    return Status.SUCCESS


# -- fixed-point Q32.32 ------------------------------------------------------
#
# Values are 64-bit two's-complement with 32 fractional bits.  A product is
# the exact 128-bit (a * b) arithmetically shifted right 32, truncated to
# 64 bits; sums wrap mod 2**64.  Everything below stays in int64: the 32-bit
# limb decomposition keeps every intermediate's low 64 bits exact, so the
# results are bit-identical on every platform (and to a big-integer model).

FIX_ONE = 1 << 32
MASK32 = np.int64(0xFFFFFFFF)


def qmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        ah = a >> 32
        al = a & MASK32
        bh = b >> 32
        bl = b & MASK32
        # Logical right shift of the low product: mask off sign extension.
        mid = ((al * bl) >> 32) & MASK32
        return ah * b + al * bh + mid


def qmatvec(mat: np.ndarray, vec: np.ndarray) -> np.ndarray:
    """Row-wise dot products in Q32.32 with mod-2**64 accumulation."""
    with np.errstate(over="ignore"):
        return np.add.reduce(qmul(mat, vec[np.newaxis, :]), axis=1)


def leaky(v: np.ndarray) -> np.ndarray:
    return np.where(v >= 0, v, v >> 6)


def leaky_grad(pre: np.ndarray, g: np.ndarray) -> np.ndarray:
    return np.where(pre >= 0, g, g >> 6)


def fixed_from_units(ints: np.ndarray, shift: int) -> np.ndarray:
    """Scale raw integers down to small fixed-point values (ints >> shift)."""
    return (ints.astype(np.int64) << 32) >> shift


# -- BP: three-layer network trained with back-propagation --------------------

@dataclass
class BpNet:
    """Region layout of the network: weights, activations, gradients, input."""

    dims: tuple                 # (n_in, n_hidden, n_out)
    w1: object                  # Region [n_hidden x n_in]
    w2: object                  # Region [n_out x n_hidden]
    activations: object         # Region: h_pre | h | y
    gradients: object           # Region: dy | dh_pre
    input: object               # Region: x | t

    @staticmethod
    def sizes(dims):
        n_in, n_hid, n_out = dims
        return {
            "w1": n_hid * n_in * 8,
            "w2": n_out * n_hid * 8,
            "activations": (2 * n_hid + n_out) * 8,
            "gradients": (n_out + n_hid) * 8,
            "input": (n_in + n_out) * 8,
        }


LEARNING_SHIFT = 8  # learning rate 2**-8


def bp_random_vector(seed: int, tag: int, n: int) -> np.ndarray:
    """Deterministic input/target/weight data, magnitudes well below 1.0."""
    rng = np.random.Generator(np.random.PCG64(np.uint64(seed) * 1000003 + tag))
    raw = rng.integers(-(2 ** 16), 2 ** 16, size=n, dtype=np.int64)
    return fixed_from_units(raw, 20)


def run_kernel_bp(dev, net: BpNet, steps: int, seed: int,
                  host_engine: AccessEngine = None, trace=None) -> Status:
    """Train the network: the host writes fresh random inputs each step, the
    device runs forward, backward, and the weight update through its MMU."""
    n_in, n_hid, n_out = net.dims
    sizes = BpNet.sizes(net.dims)
    for name in sizes:
        if getattr(net, name).size < sizes[name]:
            return Status.ERR_INVALID_ARG
    machine = dev.machine
    host = host_engine or AccessEngine(machine.host)
    engine = AccessEngine(dev, trace)

    # Host initializes the weights once; the device faults them in.
    status = host.write(net.w1.start,
                        bp_random_vector(seed, 1, n_hid * n_in).tobytes())
    if status is not Status.SUCCESS:
        return status
    status = host.write(net.w2.start,
                        bp_random_vector(seed, 2, n_out * n_hid).tobytes())
    if status is not Status.SUCCESS:
        return status

    act, grad = net.activations.start, net.gradients.start
    for step in range(steps):
        x = bp_random_vector(seed, 100 + 2 * step, n_in)
        t = bp_random_vector(seed, 101 + 2 * step, n_out)
        status = host.write(net.input.start, x.tobytes())
        if status is not Status.SUCCESS:
            return status
        status = host.write(net.input.start + n_in * 8, t.tobytes())
        if status is not Status.SUCCESS:
            return status

        # Forward pass, streamed page-wise through the device MMU.
        status, buf = engine.read(net.input.start, (n_in + n_out) * 8)
        if status is not Status.SUCCESS:
            return status
        xv = np.frombuffer(buf[:n_in * 8], dtype=np.int64)
        tv = np.frombuffer(buf[n_in * 8:], dtype=np.int64)
        status, buf = engine.read(net.w1.start, n_hid * n_in * 8)
        if status is not Status.SUCCESS:
            return status
        w1 = np.frombuffer(buf, dtype=np.int64).reshape(n_hid, n_in)
        h_pre = qmatvec(w1, xv)
        h = leaky(h_pre)
        status, buf = engine.read(net.w2.start, n_out * n_hid * 8)
        if status is not Status.SUCCESS:
            return status
        w2 = np.frombuffer(buf, dtype=np.int64).reshape(n_out, n_hid)
        y = qmatvec(w2, h)
        engine.write(act, h_pre.tobytes())
        engine.write(act + n_hid * 8, h.tobytes())
        engine.write(act + 2 * n_hid * 8, y.tobytes())

        # Backward pass and update.
        with np.errstate(over="ignore"):
            dy = y - tv
            dh = qmatvec(w2.T.copy(), dy)
            dh_pre = leaky_grad(h_pre, dh)
            engine.write(grad, dy.tobytes())
            engine.write(grad + n_out * 8, dh_pre.tobytes())
            dw2 = qmul(dy[:, np.newaxis], h[np.newaxis, :])
            dw1 = qmul(dh_pre[:, np.newaxis], xv[np.newaxis, :])
            new_w2 = w2 - (dw2 >> LEARNING_SHIFT)
            new_w1 = w1 - (dw1 >> LEARNING_SHIFT)
        status = engine.write(net.w2.start, new_w2.tobytes())
        if status is not Status.SUCCESS:
            return status
        status = engine.write(net.w1.start, new_w1.tobytes())
        if status is not Status.SUCCESS:
            return status
    return Status.SUCCESS


def bp_weight_checksum(machine, net: BpNet) -> str:
    """SHA-256 over the final weight bytes as read back by the host CPU."""
    import hashlib

    host = AccessEngine(machine.host)
    n_in, n_hid, n_out = net.dims
    _status, w1 = host.read(net.w1.start, n_hid * n_in * 8)
    _status, w2 = host.read(net.w2.start, n_out * n_hid * 8)
    digest = hashlib.sha256()
    digest.update(w1)
    digest.update(w2)
    return digest.hexdigest()


# -- DMA mapping churn ---------------------------------------------------------

class ChurnMode(Enum):
    STRICT = auto()
    ASYNC = auto()


@dataclass
class ChurnReport:
    iterations: int = 0
    broadcasts: int = 0
    detector_violations: int = 0
    simulated_op_count: int = 0


def run_dma_churn(dev, iterations: int, buf_pages: int = 16,
                  mode: ChurnMode = ChurnMode.STRICT, seed: int = 0,
                  report: ChurnReport = None) -> ChurnReport:
    """Map/access/unmap short-lived DMA buffers at a high rate.

    In STRICT mode every unmap flushes the device TLB before returning; in
    ASYNC mode unmaps are deferred so invalidations coalesce, with the freed
    frames quarantined until their broadcast completes.  The detector checks
    that no freshly allocated frame was still quarantined at allocation
    time, which would be a use-after-unmap window.
    """
    import random as _random

    rng = _random.Random(seed)
    space = dev.active_as
    machine = dev.machine
    host_pool = machine.host.pool
    report = report or ChurnReport()
    engine = AccessEngine(dev)
    before = machine.metrics.tlb_invalidation_broadcasts
    for _ in range(iterations):
        pages = rng.randint(1, buf_pages)
        status, region = space.alloc(size=pages * PAGE_SIZE)
        if status.is_error:
            break
        status, frames = host_pool.alloc(pages)
        if status.is_error:
            space.dealloc(region)
            break
        quarantined = space.asyncq.quarantined()
        if any((f.pool, f.addr) in quarantined for f in frames):
            report.detector_violations += 1
        region.map(Prot.RW, frames)
        for i in range(pages):
            engine.read(region.start + i * PAGE_SIZE, 8)
        if mode is ChurnMode.STRICT:
            region.unmap()
            host_pool.free_frames([f.addr for f in frames])
        else:
            region.unmap(async_=True)
        region.dealloc()
        space.asyncq.tick()
        report.iterations += 1
    space.synchronize()
    report.broadcasts += machine.metrics.tlb_invalidation_broadcasts - before
    report.simulated_op_count += engine.op_count
    return report
