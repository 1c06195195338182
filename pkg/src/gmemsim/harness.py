"""Command-line harness: builds devices and spaces from flags, runs one
scenario, and emits a machine-readable metrics report.

Scenarios: ``vectoradd`` and ``bp`` exercise fault-driven migration and
oversubscription on a simulated GPU; ``churn`` benchmarks strict versus
batched unmap invalidation on a DMA device; ``passthrough-demo`` grows and
shrinks a space shared by a faultable device and a wired-only DMA device,
checking coherence after every change.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import threading
import time

import numpy as np

from .core import PAGE_SIZE, SUPERPAGE_SIZE, Prot, Status
from .machine import HOST_FORMAT_ID, Gmem
from .simdev import (
    AccessEngine,
    BpNet,
    ChurnMode,
    ChurnReport,
    SimDeviceConfig,
    SimDeviceKind,
    bp_weight_checksum,
    check_tlb_consistency,
    make_sim_device,
    run_dma_churn,
    run_kernel_bp,
    run_kernel_vectoradd,
)
from .vaspace import AllocPolicy, AttachMode, PlacementMode

PAPER_SCALE_DIMS = (4096, 4096, 128)


class ConfigError(Exception):
    pass


def parse_size(text: str) -> int:
    """Parse a byte size: bare digits or a KiB/MiB/GiB suffix."""
    text = text.strip()
    for suffix, scale in (("KiB", 1024), ("MiB", 1024 ** 2), ("GiB", 1024 ** 3)):
        if text.endswith(suffix):
            body = text[: -len(suffix)]
            if not body.isdigit():
                raise ConfigError(f"bad size: {text!r}")
            return int(body) * scale
    if not text.isdigit():
        raise ConfigError(f"bad size: {text!r}")
    return int(text)


def parse_dims(text: str):
    parts = text.split(",")
    if len(parts) != 3 or not all(p.strip().isdigit() for p in parts):
        raise ConfigError(f"bad dims: {text!r} (expected in,hidden,out)")
    return tuple(int(p) for p in parts)


def _seed_from(args) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("GMEM_SIM_SEED")
    if env is not None and env.isdigit():
        return int(env)
    return 0


def _alloc_region(space, nbytes: int, granule: int = PAGE_SIZE):
    size = (nbytes + granule - 1) // granule * granule
    status, region = space.alloc(size=size, align=granule)
    if status.is_error:
        raise ConfigError(f"address space too small for {nbytes} bytes")
    return region


def _build_gpu_setup(args, seed: int):
    """Machine + space + host + one compute device, per the common flags."""
    machine = Gmem()
    if args.pt_mode == "shared" and args.format_id not in (None, HOST_FORMAT_ID):
        raise ConfigError("shared page tables require the host format id")
    pt_mode = AttachMode.SHARED if args.pt_mode == "shared" else AttachMode.COHERENT
    dev_mem = parse_size(args.dev_mem) if args.dev_mem not in ("", "0") else 0
    granule = parse_size(args.prep_granularity)
    cfg = SimDeviceConfig(
        kind=SimDeviceKind.DISCRETE_GPU if dev_mem else SimDeviceKind.INTEGRATED_GPU,
        local_mem_bytes=dev_mem,
        pt_mode=pt_mode,
        prep_granularity=granule,
        format_id=args.format_id if args.format_id is not None else (
            HOST_FORMAT_ID if pt_mode is AttachMode.SHARED else 2),
    )
    status, gpu = make_sim_device(machine, cfg)
    if status.is_error:
        raise ConfigError(f"device config rejected: {status.name}")
    status, space = machine.as_create(0, 1 << 34, AllocPolicy.FIRST_FIT)
    if status.is_error:
        raise ConfigError("as_create failed")
    space.attach(machine.host, pt_mode, activate=True)
    space.attach(gpu, pt_mode, activate=True)
    return machine, space, gpu


def _apply_policy(args, space, regions):
    if args.policy == "remote":
        for region in regions:
            region.set_policy(None, PlacementMode.REPLICATE_REMOTE)


def _vector_data(seed: int, tag: int, n: int) -> np.ndarray:
    rng = np.random.Generator(np.random.PCG64(np.uint64(seed) * 7919 + tag))
    return rng.integers(0, 2 ** 63, size=n, dtype=np.uint64)


def scenario_vectoradd(args) -> dict:
    seed = _seed_from(args)
    machine, space, gpu = _build_gpu_setup(args, seed)
    n = args.n
    a = _alloc_region(space, n * 8)
    b = _alloc_region(space, n * 8)
    out = _alloc_region(space, n * 8)
    _apply_policy(args, space, (a, b, out))
    host = AccessEngine(machine.host)
    va = _vector_data(seed, 1, n)
    vb = _vector_data(seed, 2, n)
    host.write(a.start, va.tobytes())
    host.write(b.start, vb.tobytes())
    status = run_kernel_vectoradd(gpu, a, b, out, n)
    if status is not Status.SUCCESS:
        raise ScenarioError(f"vectoradd failed: {status.name}")
    _status, result = host.read(out.start, n * 8)
    got = np.frombuffer(result, dtype=np.uint64)
    with np.errstate(over="ignore"):
        expect = va + vb
    if not np.array_equal(got, expect):
        raise ScenarioError("vectoradd output mismatch")
    return {
        "scenario": "vectoradd",
        "n": n,
        "output_sha256": hashlib.sha256(result).hexdigest(),
        **_metrics_fields(machine),
    }


def scenario_bp(args) -> dict:
    seed = _seed_from(args)
    machine, space, gpu = _build_gpu_setup(args, seed)
    dims = PAPER_SCALE_DIMS if args.paper_scale else parse_dims(args.dims)
    sizes = BpNet.sizes(dims)
    net = BpNet(
        dims=dims,
        w1=_alloc_region(space, sizes["w1"]),
        w2=_alloc_region(space, sizes["w2"]),
        activations=_alloc_region(space, sizes["activations"]),
        gradients=_alloc_region(space, sizes["gradients"]),
        input=_alloc_region(space, sizes["input"]),
    )
    _apply_policy(args, space, (net.w1, net.w2, net.activations,
                                net.gradients, net.input))
    status = run_kernel_bp(gpu, net, args.steps, seed)
    if status is not Status.SUCCESS:
        raise ScenarioError(f"bp failed: {status.name}")
    return {
        "scenario": "bp",
        "dims": ",".join(str(d) for d in dims),
        "steps": args.steps,
        "weight_checksum": bp_weight_checksum(machine, net),
        **_metrics_fields(machine),
    }


def scenario_churn(args) -> dict:
    seed = _seed_from(args)
    machine = Gmem()
    status, space = machine.as_create(0, 1 << 32, AllocPolicy.FIRST_FIT)
    if status.is_error:
        raise ConfigError("as_create failed")
    space.asyncq.batch_size = args.batch
    space.asyncq.flush_interval = args.flush_interval
    mode = ChurnMode.ASYNC if args.unmap_mode == "async" else ChurnMode.STRICT
    engines = []
    for _ in range(args.engines):
        status, dma = make_sim_device(machine, SimDeviceConfig(
            kind=SimDeviceKind.DMA_DEVICE, format_id=7))
        if status.is_error:
            raise ConfigError("device create failed")
        space.attach(dma, AttachMode.COHERENT, activate=True)
        engines.append(dma)
    per_engine = args.iterations // args.engines
    reports = [ChurnReport() for _ in engines]
    threads = [
        threading.Thread(
            target=run_dma_churn,
            args=(dma, per_engine, args.buf_pages, mode, seed + i, reports[i]),
        )
        for i, dma in enumerate(engines)
    ]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    space.synchronize()
    stale = check_tlb_consistency(engines)
    total = ChurnReport(
        iterations=sum(r.iterations for r in reports),
        broadcasts=machine.metrics.tlb_invalidation_broadcasts,
        detector_violations=sum(r.detector_violations for r in reports) + stale,
        simulated_op_count=sum(r.simulated_op_count for r in reports),
    )
    if total.detector_violations:
        raise ScenarioError(
            f"{total.detector_violations} use-after-unmap violations")
    return {
        "scenario": "churn",
        "iterations": total.iterations,
        "broadcasts": total.broadcasts,
        "detector_violations": total.detector_violations,
        "simulated_op_count": total.simulated_op_count,
        **_metrics_fields(machine),
    }


def scenario_passthrough_demo(args) -> dict:
    """Grow and shrink one space attached to an EPT-like faultable device and
    a wired-only DMA device, verifying the DMA view after every change."""
    machine = Gmem()
    status, space = machine.as_create(0, 1 << 30, AllocPolicy.FIRST_FIT)
    if status.is_error:
        raise ConfigError("as_create failed")
    status, ept = make_sim_device(machine, SimDeviceConfig(
        kind=SimDeviceKind.INTEGRATED_GPU, format_id=3))
    status, dma = make_sim_device(machine, SimDeviceConfig(
        kind=SimDeviceKind.DMA_DEVICE, format_id=7))
    space.attach(ept, AttachMode.COHERENT, activate=True)
    space.attach(dma, AttachMode.COHERENT, activate=True)
    host_pool = machine.host.pool

    live = []
    checks = 0

    def verify():
        expected = {}
        for region, frames in live:
            for i, frame in enumerate(frames):
                expected[region.start + i * PAGE_SIZE] = frame
        table = dma.table_for(space)
        seen = {va: leaf.pa for va, leaf in table.walk_leaves()}
        if seen != expected:
            raise ScenarioError("pass-through view diverged from wired set")
        return 1

    checks += verify()
    for _ in range(args.grow):
        status, region = space.alloc(size=args.region_pages * PAGE_SIZE)
        if status.is_error:
            raise ScenarioError("grow failed")
        status, frames = host_pool.alloc(args.region_pages)
        region.map(Prot.RW, frames)
        live.append((region, frames))
        checks += verify()
    for _ in range(args.shrink):
        if not live:
            break
        region, frames = live.pop(0)
        region.dealloc()
        checks += verify()
    return {
        "scenario": "passthrough-demo",
        "verify_passes": checks,
        "grow": args.grow,
        "shrink": args.shrink,
        **_metrics_fields(machine),
    }


class ScenarioError(Exception):
    pass


def _metrics_fields(machine: Gmem) -> dict:
    snap = machine.metrics.snapshot()
    return {
        "dev-zero-fill": snap["zero_fill_bytes"],
        "host-to-dev": snap["host_to_dev_bytes"],
        "dev-to-host": snap["dev_to_host_bytes"],
        "dev_faults": snap["dev_faults"],
        "cpu_faults": snap["cpu_faults"],
        "tlb_invalidation_broadcasts": snap["tlb_invalidation_broadcasts"],
        "tlb_entries_invalidated": snap["tlb_entries_invalidated"],
        "pt_nodes_current": snap["pt_nodes_current"],
        "pt_nodes_peak": snap["pt_nodes_peak"],
        "evicted_pages": snap["evicted_pages"],
    }


def _echo_config(args, skip=("output", "trace")) -> dict:
    out = {}
    for key, value in sorted(vars(args).items()):
        if key in skip or key == "func":
            continue
        out[f"config.{key}"] = value if value is not None else ""
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gmemsim",
        description="Simulated-device memory management scenarios")
    sub = parser.add_subparsers(dest="scenario", required=True)

    def common(p):
        p.add_argument("--output", help="write the report to this path")
        p.add_argument("--seed", type=int, default=None,
                       help="RNG seed (falls back to GMEM_SIM_SEED, then 0)")
        p.add_argument("--pt-mode", choices=("shared", "coherent"),
                       default="coherent", help="page table attachment mode")
        p.add_argument("--policy", choices=("unique", "remote"),
                       default="unique",
                       help="fault placement: migrate or map remotely")
        p.add_argument("--dev-mem", default="64MiB",
                       help="device local memory (e.g. 64MiB); 0 = none")
        p.add_argument("--prep-granularity", default="4096",
                       help="zero-fill granule per first-touch fault")
        p.add_argument("--format-id", type=int, default=None,
                       help="device page table format id")

    p = sub.add_parser("vectoradd", help="device-side 64-bit vector addition")
    common(p)
    p.add_argument("--n", type=int, default=65536, help="element count")
    p.set_defaults(func=scenario_vectoradd)

    p = sub.add_parser("bp", help="three-layer back-propagation training")
    common(p)
    p.add_argument("--dims", default="16,16,4", help="in,hidden,out")
    p.add_argument("--paper-scale", action="store_true",
                   help=f"use the large preset {PAPER_SCALE_DIMS}")
    p.add_argument("--steps", type=int, default=3, help="training steps")
    p.set_defaults(func=scenario_bp)

    p = sub.add_parser("churn", help="DMA map/unmap churn benchmark")
    p.add_argument("--output", help="write the report to this path")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--iterations", type=int, default=1000)
    p.add_argument("--buf-pages", type=int, default=16,
                   help="max pages per DMA buffer (1..16)")
    p.add_argument("--unmap-mode", choices=("strict", "async"),
                   default="strict")
    p.add_argument("--batch", type=int, default=64,
                   help="async flush batch size")
    p.add_argument("--flush-interval", type=int, default=256,
                   help="async flush age limit in ticks")
    p.add_argument("--engines", type=int, default=1,
                   help="concurrent churn engines (one DMA device each)")
    p.set_defaults(func=scenario_churn)

    p = sub.add_parser("passthrough-demo",
                       help="coherent wired view across grow/shrink")
    p.add_argument("--output", help="write the report to this path")
    p.add_argument("--grow", type=int, default=4)
    p.add_argument("--shrink", type=int, default=2)
    p.add_argument("--region-pages", type=int, default=4)
    p.set_defaults(func=scenario_passthrough_demo)
    return parser


def render_report(report: dict) -> str:
    return json.dumps(report, sort_keys=True, indent=2) + "\n"


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0
    start = time.monotonic()
    try:
        report = args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except ScenarioError as exc:
        print(f"scenario error: {exc}", file=sys.stderr)
        return 1
    report.update(_echo_config(args))
    report["wall_time"] = round(time.monotonic() - start, 6)
    text = render_report(report)
    if args.output:
        with open(args.output, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return 0


if __name__ == "__main__":
    sys.exit(main())
