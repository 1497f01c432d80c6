"""Threaded execution engine: pinned per-core workers behind a uniform
``submit(functor, query, mapping_id)`` surface.

Graph-table queries ride as single tasks; list-scan queries are decomposed
by a wrapper above ``submit`` and k-way merged on the submitting thread, so
the submission surface itself stays index-agnostic.  Completion counters
flow to the workload monitor, which periodically rebuilds and republishes
the CCD map.
"""

from __future__ import annotations

import logging
import os
import threading
import time
from dataclasses import dataclass

import numpy as np

from .dispatch import (
    CcdMap,
    SnapshotRegistry,
    WindowConfig,
    WorkloadMonitor,
    pick_ccd,
)
from .hnsw import HnswIndex, hnsw_search
from .ivf import IvfIndex, ivf_scan_list, ivf_select_lists, merge_topk
from .tasks import (
    KIND_HNSW,
    KIND_IVF_LIST,
    BackpressureError,
    MappingId,
    Query,
    SearchFunctor,
    ShutdownError,
    Task,
    TaskHandle,
    TaskOutput,
    WorkCounters,
)
from .topology import Topology, neighbor_sets
from .vectors import Hit
from .workers import (
    DEFAULT_QUEUE_CAPACITY,
    SchedMode,
    StealPolicy,
    StealSummary,
    TaskDeque,
    WorkerState,
    enqueue_to_ccd,
    steal_stats,
)

log = logging.getLogger(__name__)

POOL = -1  # router target for the shared-pool baseline

_SPIN_ROUNDS = 64
_PARK_S = 0.001


def now_us() -> int:
    return time.monotonic_ns() // 1000


@dataclass
class _HnswEntry:
    index: HnswIndex
    ef_search: int


@dataclass
class _IvfEntry:
    index: IvfIndex
    nprobe: int


class TableHost:
    """Index registration and search-functor construction, shared by the
    threaded runtime and the deterministic simulator."""

    def __init__(self, record_touched: bool = False):
        self._hnsw_tables: dict[int, _HnswEntry] = {}
        self._ivf_tables: dict[int, _IvfEntry] = {}
        self.record_touched = record_touched

    def register_hnsw_table(self, table: int, index: HnswIndex, ef_search: int) -> None:
        self._hnsw_tables[table] = _HnswEntry(index=index, ef_search=ef_search)

    def register_ivf_table(self, table: int, index: IvfIndex, nprobe: int) -> None:
        self._ivf_tables[table] = _IvfEntry(index=index, nprobe=nprobe)

    def hnsw_entry(self, table: int) -> _HnswEntry:
        try:
            return self._hnsw_tables[table]
        except KeyError:
            raise KeyError(f"hnsw table {table} not registered") from None

    def ivf_entry(self, table: int) -> _IvfEntry:
        try:
            return self._ivf_tables[table]
        except KeyError:
            raise KeyError(f"ivf table {table} not registered") from None

    def hnsw_functor(self, table: int) -> SearchFunctor:
        entry = self.hnsw_entry(table)
        idx = entry.index
        dim = idx.vectors.dim

        def fn(q: Query) -> TaskOutput:
            out = hnsw_search(
                idx, q.vector, q.k, max(entry.ef_search, q.k),
                record_touched=self.record_touched,
            )
            counters = WorkCounters(KIND_HNSW, out.nodes_touched, dim, idx.m)
            return TaskOutput(hits=out.hits, counters=counters, touched=out.touched)

        return fn

    def ivf_scan_functor(self, table: int, cluster: int) -> SearchFunctor:
        idx = self.ivf_entry(table).index
        dim = idx.vectors.dim

        def fn(q: Query) -> TaskOutput:
            out = ivf_scan_list(idx, cluster, q.vector, q.k)
            counters = WorkCounters(KIND_IVF_LIST, out.scanned, dim)
            return TaskOutput(hits=out.local_hits, counters=counters)

        return fn


class Router:
    """Mode-dependent task placement.  Callers serialize access (the threaded
    runtime routes under its intake lock; the simulator is single-threaded)."""

    def __init__(
        self,
        mode: SchedMode,
        topo: Topology,
        workers: list[WorkerState],
        pool: TaskDeque | None,
    ):
        self.mode = mode
        self.topo = topo
        self.workers = workers
        self.pool = pool
        self.by_core = {w.core: w for w in workers}
        self.ccd_workers: list[list[WorkerState]] = [
            [self.by_core[c] for c in sorted(cores)] for cores in topo.cores_per_ccd
        ]
        self._rr = 0

    def route(self, task: Task, snap: CcdMap) -> int:
        """Place the task; returns the chosen core id (POOL for the shared pool)."""
        if self.mode is SchedMode.V2:
            ccd = pick_ccd(task.mapping_id, snap, self.topo)
            return enqueue_to_ccd(task, self.ccd_workers[ccd])
        if self.mode is SchedMode.V0 and task.mapping_id.kind == KIND_IVF_LIST:
            assert self.pool is not None
            if not self.pool.push(task):
                raise BackpressureError("shared scan pool is full")
            return POOL
        # round-robin core assignment; a full target spills to the next core
        start = self._rr
        self._rr += 1
        n = len(self.workers)
        for off in range(n):
            w = self.workers[(start + off) % n]
            if w.deque.push(task):
                return w.core
        raise BackpressureError("all core queues are full")


class IvfPendingQuery:
    """Outstanding decomposed list-scan query: one handle per probed list."""

    def __init__(self, query: Query, handles: list[TaskHandle]):
        self.query = query
        self.handles = handles

    def done(self) -> bool:
        return all(h.done() for h in self.handles)

    def completed_us(self) -> int:
        return max(h.completed_us for h in self.handles)

    def wait(self, timeout: float | None = None) -> list[Hit]:
        """Await every scan (all drain even on failure), merge, return top-k."""
        outputs: list[TaskOutput] = []
        first_error: BaseException | None = None
        for h in self.handles:
            try:
                outputs.append(h.wait(timeout))
            except BaseException as e:  # noqa: BLE001 - propagated after drain
                if first_error is None:
                    first_error = e
        if first_error is not None:
            raise first_error
        return merge_topk([o.hits for o in outputs], self.query.k)


class Runtime(TableHost):
    """Per-core worker threads with private deques and window-driven remapping."""

    def __init__(
        self,
        topo: Topology,
        mode: SchedMode = SchedMode.V2,
        *,
        window: WindowConfig | None = None,
        auto_window: bool = False,
        queue_capacity: int = DEFAULT_QUEUE_CAPACITY,
        seed: int = 0,
        pin: bool = False,
        record_touched: bool = False,
        cross_gate: bool = False,
        on_reclaim=None,
        on_record=None,
        on_publish=None,
    ):
        super().__init__(record_touched=record_touched)
        self.topo = topo
        self.mode = mode
        self.policy = StealPolicy(mode=mode, cross_gate=cross_gate)
        nb = neighbor_sets(topo)
        self.workers = [
            WorkerState(core, topo.core_to_ccd[core], nb, seed=seed, capacity=queue_capacity)
            for core in topo.all_cores()
        ]
        self._victims = {w.core: w.deque for w in self.workers}
        self._worker_index = {w.core: i for i, w in enumerate(self.workers)}
        self.pool = TaskDeque(capacity=1 << 20) if mode is SchedMode.V0 else None
        self.router = Router(mode, topo, self.workers, self.pool)
        self.registry = SnapshotRegistry(on_reclaim=on_reclaim)
        self.monitor = WorkloadMonitor(
            topo,
            self.registry,
            window=window,
            workers=len(self.workers),
            on_record=on_record,
            on_publish=on_publish,
        )
        self._auto_window = auto_window
        self._pin = pin
        self._wake_events = [threading.Event() for _ in self.workers]
        self._intake_lock = threading.Lock()
        self._closed = False
        self._stopping = threading.Event()
        self._threads: list[threading.Thread] = []
        self._monitor_thread: threading.Thread | None = None
        self._seq = 0
        self._started = False

    # -- lifecycle ---------------------------------------------------------

    def start(self) -> "Runtime":
        if self._started:
            return self
        self._started = True
        self.monitor._window_start = now_us()
        for i, w in enumerate(self.workers):
            t = threading.Thread(
                target=self._worker_main, args=(i, w), name=f"worker-{w.core}", daemon=True
            )
            self._threads.append(t)
            t.start()
        if self._auto_window:
            self._monitor_thread = threading.Thread(
                target=self._monitor_main, name="monitor", daemon=True
            )
            self._monitor_thread.start()
        return self

    def shutdown(self) -> None:
        """Two-phase stop: close intake, drain every queue, join workers."""
        with self._intake_lock:
            if self._closed:
                return
            self._closed = True
        self._stopping.set()
        for ev in self._wake_events:
            ev.set()
        for t in self._threads:
            t.join()
        if self._monitor_thread is not None:
            self._monitor_thread.join()

    def __enter__(self) -> "Runtime":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.shutdown()

    # -- submission --------------------------------------------------------

    def submit(self, functor: SearchFunctor, query: Query, mapping_id: MappingId) -> TaskHandle:
        """Queue one task on a core of the CCD the dispatcher picks for the id."""
        with self._intake_lock:
            if self._closed:
                raise ShutdownError("runtime is shut down")
            snap = self.registry.stamp()
            ts = now_us()
            if query.arrival_us == 0:
                query.arrival_us = ts
            handle = TaskHandle(submit_us=ts)
            self._seq += 1
            task = Task(
                mapping_id=mapping_id,
                query=query,
                functor=functor,
                epoch=snap.epoch,
                handle=handle,
                submit_us=ts,
                seq=self._seq,
            )
            try:
                core = self.router.route(task, snap)
            except BaseException:
                self.registry.retire(task.epoch)
                raise
        self._wake(core)
        return handle

    def submit_hnsw_query(self, table: int, query: Query) -> TaskHandle:
        return self.submit(self.hnsw_functor(table), query, MappingId.hnsw_table(table))

    def run_hnsw_query(self, table: int, query: Query) -> list[Hit]:
        return self.submit_hnsw_query(table, query).wait().hits

    def submit_ivf_query(
        self, table: int, query: Query, nprobe: int | None = None
    ) -> IvfPendingQuery:
        """Select lists on the calling thread, then submit one scan per list."""
        entry = self.ivf_entry(table)
        nprobe = entry.nprobe if nprobe is None else nprobe
        clusters = ivf_select_lists(entry.index, query.vector, nprobe)
        handles = [
            self.submit(self.ivf_scan_functor(table, c), query, MappingId.ivf_list(table, c))
            for c in clusters
        ]
        return IvfPendingQuery(query, handles)

    def run_ivf_query(self, table: int, query: Query, nprobe: int | None = None) -> list[Hit]:
        return self.submit_ivf_query(table, query, nprobe).wait()

    # -- introspection -----------------------------------------------------

    def steal_summary(self) -> StealSummary:
        return steal_stats(self.workers)

    def advance_window(self, at_us: int | None = None) -> CcdMap | None:
        return self.monitor.advance_window(now_us() if at_us is None else at_us)

    # -- internals ---------------------------------------------------------

    def _wake(self, core: int) -> None:
        if core == POOL:
            for ev in self._wake_events:
                ev.set()
        else:
            self._wake_events[self._worker_index[core]].set()

    def _execute(self, ws: WorkerState, widx: int, task: Task) -> None:
        self.registry.assert_live(task.epoch)
        end = 0
        try:
            out = task.functor(task.query)
        except BaseException as e:  # noqa: BLE001 - routed to the handle
            end = now_us()
            zero = WorkCounters(task.mapping_id.kind, 0, 0)
            self.monitor.record_completion(widx, task.mapping_id, zero, end - task.submit_us)
            ws.stats.executed += 1
            self.registry.retire(task.epoch)
            task.handle.set_error(e, completed_us=end)
            return
        end = now_us()
        self.monitor.record_completion(
            widx, task.mapping_id, out.counters, end - task.submit_us
        )
        ws.stats.executed += 1
        self.registry.retire(task.epoch)
        task.handle.set_result(out, completed_us=end)

    def _worker_main(self, widx: int, ws: WorkerState) -> None:
        if self._pin:
            try:
                os.sched_setaffinity(0, {ws.core})
            except (AttributeError, OSError) as e:
                log.warning("failed to pin worker to core %d: %s", ws.core, e)
        wake = self._wake_events[widx]
        spins = 0
        while True:
            task = ws.acquire(self._victims, self.policy)
            if task is None and self.pool is not None:
                task = self.pool.pop_local()
            if task is not None:
                self._execute(ws, widx, task)
                spins = 0
                continue
            if self._stopping.is_set():
                if len(ws.deque) == 0 and (self.pool is None or len(self.pool) == 0):
                    return
                continue
            spins += 1
            if spins >= _SPIN_ROUNDS:
                wake.wait(_PARK_S)
                wake.clear()
                spins = 0

    def _monitor_main(self) -> None:
        period = min(0.25, self.monitor.window.window_us / 4e6)
        while not self._stopping.wait(period):
            self.monitor.advance_window(now_us())


def make_query(vector, k: int, *, filter_tag=None, client=None, arrival_us: int = 0) -> Query:
    return Query(
        vector=np.asarray(vector, dtype=np.float32),
        k=k,
        filter_tag=filter_tag,
        client=client,
        arrival_us=arrival_us,
    )
