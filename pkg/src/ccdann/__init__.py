"""Chiplet-aware thread orchestration for in-memory vector search.

A scheduling runtime that routes HNSW table searches and IVF list scans to
CCDs by estimated memory traffic, remaps assignments per time window via
epoched snapshots, and steals work same-CCD-first — plus a deterministic
simulated-topology twin with a per-CCD cache model so the locality behavior
is testable on any machine.
"""

from .topology import NeighborSets, Topology, TopologyError, load_topology, neighbor_sets
from .vectors import (
    Hit,
    TopK,
    VectorSet,
    brute_force_topk,
    gen_gaussian_mixture,
    l2_sq,
    read_dataset,
    recall_at_k,
    write_dataset,
)
from .hnsw import HnswIndex, HnswSearchOutcome, calibrate_ef_search, hnsw_build, hnsw_search
from .ivf import (
    IvfIndex,
    ListScanOutcome,
    calibrate_nprobe,
    default_nlist,
    ivf_build,
    ivf_scan_list,
    ivf_select_lists,
    merge_topk,
)
from .tasks import (
    BackpressureError,
    MappingId,
    Query,
    ShutdownError,
    Task,
    TaskHandle,
    TaskOutput,
    WorkCounters,
)
from .dispatch import (
    CcdMap,
    SnapshotRegistry,
    TrafficEstimate,
    WindowConfig,
    WorkloadMonitor,
    build_map,
    estimate_hnsw_traffic,
    estimate_ivf_traffic,
    pick_ccd,
)
from .workers import SchedMode, StealPolicy, StealSummary, TaskDeque, WorkerState
from .runtime import Runtime, make_query
from .cachesim import LlcModel, task_block_trace
from .simulate import SimRuntime
from .workload import TableSpec, TraceSpec, generate_trace, materialize_requests, replay, zipf_weights
from .bench import RunConfig, RunReport, compare_runs, percentile, run_benchmark

__version__ = "0.1.0"
