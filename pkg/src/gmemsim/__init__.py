"""gmemsim: generalized memory management for a host CPU and simulated devices.

A user-space model of centralized virtual memory management: devices attach
to shared address spaces, their page tables are kept coherent, faults drive
zero-fill, migration, or remote mapping, device memory oversubscribes onto
host memory, and unmaps can be deferred with coalesced TLB invalidation.
"""

from .core import (
    PAGE_SIZE,
    SUPERPAGE_SIZE,
    Device,
    DeviceCaps,
    Metrics,
    MmuDescriptor,
    MmuHooks,
    PhysAddr,
    Prot,
    Status,
)
from .machine import Gmem, HOST_FORMAT_ID
from .vaspace import (
    AddressSpace,
    AllocPolicy,
    AttachMode,
    Placement,
    PlacementMode,
    Region,
)
from .logmap import (
    Backed,
    MappingSet,
    Swapped,
    UNBACKED,
    logical_lookup,
    mapping_set_unmap,
    region_map,
    region_unmap,
)
from .pagetable import PageTable, TlbModel, shootdown
from .physmem import PhysMemPool, evict, migrate_page, prepare_zero, register_physmem
from .fault import dev_fault, host_fault
from .simdev import (
    AccessEngine,
    BpNet,
    ChurnMode,
    ChurnReport,
    SimDeviceConfig,
    SimDeviceKind,
    check_tlb_consistency,
    make_sim_device,
    run_dma_churn,
    run_kernel_bp,
    run_kernel_vectoradd,
    sim_access,
)

__version__ = "0.1.0"
