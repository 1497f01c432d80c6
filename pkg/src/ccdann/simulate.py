"""Deterministic lockstep engine: identical scheduling rules, simulated clock.

Workers advance in fixed core order, one acquire per tick, with task service
time proportional to estimated bytes read.  Because execution order is a
pure function of the inputs, cache hit/miss counts, steal statistics and
epoch timing are exactly reproducible — which is what lets the locality
claims be asserted as tests rather than eyeballed from hardware counters.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field

import numpy as np

from .cachesim import CacheReport, LlcModel, task_block_trace
from .dispatch import SnapshotRegistry, WindowConfig, WorkloadMonitor, estimate_traffic
from .ivf import ivf_select_lists, merge_topk
from .tasks import (
    KIND_HNSW,
    BackpressureError,
    MappingId,
    Query,
    Task,
    TaskHandle,
    TaskOutput,
)
from .topology import Topology, neighbor_sets
from .vectors import Hit
from .workers import (
    DEFAULT_QUEUE_CAPACITY,
    ProbeRecord,
    SchedMode,
    StealPolicy,
    StealSummary,
    TaskDeque,
    WorkerState,
    steal_stats,
)
from .runtime import POOL, Router, TableHost
from .workload import Request

DEFAULT_BYTES_PER_TICK = 2048


@dataclass
class _PendingQuery:
    req: Request
    inject_tick: int
    remaining: int
    parts: list[list[Hit]] = field(default_factory=list)
    done_tick: int = -1


@dataclass
class SimReport:
    completions: int
    makespan_ticks: int
    latencies_ticks: np.ndarray
    steals: StealSummary
    cache: CacheReport | None
    epochs_published: int
    hits: dict[int, list[Hit]] | None = None
    probe_log: list[ProbeRecord] | None = None


class SimRuntime(TableHost):
    """Single-stepped twin of the threaded runtime.

    Same deques, same routing, same steal policies and window remapping;
    only the executor differs: a tick loop that visits cores in fixed order.
    The cache model, when attached, is updated inline at execution time, so
    its access stream is deterministic too.
    """

    def __init__(
        self,
        topo: Topology,
        mode: SchedMode = SchedMode.V2,
        *,
        window: WindowConfig | None = None,
        cache: LlcModel | None = None,
        bytes_per_tick: int = DEFAULT_BYTES_PER_TICK,
        queue_capacity: int = DEFAULT_QUEUE_CAPACITY,
        seed: int = 0,
        cross_gate: bool = False,
        on_reclaim=None,
        on_record=None,
        on_publish=None,
    ):
        super().__init__(record_touched=cache is not None)
        self.topo = topo
        self.mode = mode
        self.policy = StealPolicy(mode=mode, cross_gate=cross_gate)
        nb = neighbor_sets(topo)
        self.workers = [
            WorkerState(core, topo.core_to_ccd[core], nb, seed=seed, capacity=queue_capacity)
            for core in topo.all_cores()
        ]
        self._victims = {w.core: w.deque for w in self.workers}
        self._windex = {w.core: i for i, w in enumerate(self.workers)}
        self.pool = TaskDeque(capacity=1 << 20) if mode is SchedMode.V0 else None
        self.router = Router(mode, topo, self.workers, self.pool)
        self.registry = SnapshotRegistry(on_reclaim=on_reclaim)
        self.monitor = WorkloadMonitor(
            topo,
            self.registry,
            window=window,
            workers=len(self.workers),
            start_us=0,
            on_record=on_record,
            on_publish=on_publish,
        )
        self.cache = cache
        self.bytes_per_tick = bytes_per_tick
        self._est_cache_key: MappingId | None = None

    def _make_tasks(self, pending: _PendingQuery, tick: int) -> list[Task]:
        req = pending.req
        if req.kind == "hnsw":
            mids = [MappingId.hnsw_table(req.table)]
            fns = [self.hnsw_functor(req.table)]
        else:
            entry = self.ivf_entry(req.table)
            nprobe = req.nprobe if req.nprobe is not None else entry.nprobe
            clusters = ivf_select_lists(entry.index, req.query.vector, nprobe)
            mids = [MappingId.ivf_list(req.table, c) for c in clusters]
            fns = [self.ivf_scan_functor(req.table, c) for c in clusters]
        pending.remaining = len(mids)
        tasks = []
        for mid, fn in zip(mids, fns):
            snap = self.registry.stamp()
            handle = TaskHandle(submit_us=tick)
            tasks.append(
                Task(
                    mapping_id=mid,
                    query=req.query,
                    functor=fn,
                    epoch=snap.epoch,
                    handle=handle,
                    submit_us=tick,
                    seq=req.seq,
                )
            )
        return tasks

    def run(
        self,
        requests: list[Request],
        *,
        closed_loop_clients: int | None = None,
        arrivals_per_tick: float | None = None,
        ts_scale: float = 1.0,
        capture_hits: bool = False,
        probe_log: list[ProbeRecord] | None = None,
        max_ticks: int = 50_000_000,
    ) -> SimReport:
        """Replay a request sequence to completion under the simulated clock.

        Closed loop keeps a fixed number of requests outstanding; otherwise
        arrivals follow either a fixed per-tick rate or (by default) the
        trace timestamps, one tick per microsecond.
        """
        if closed_loop_clients is not None and arrivals_per_tick is not None:
            raise ValueError("choose closed-loop clients or an open-loop arrival rate")
        closed = closed_loop_clients is not None

        next_req = 0
        outstanding: dict[int, _PendingQuery] = {}
        overflow: list[Task] = []
        # (done_tick, insertion order, worker index, task, output)
        finishing: list[tuple[int, int, int, Task, TaskOutput]] = []
        fin_seq = 0
        busy_until = [0] * len(self.workers)
        latencies = np.zeros(len(requests), dtype=np.int64)
        hits: dict[int, list[Hit]] | None = {} if capture_hits else None
        completions = 0
        credit = 0.0
        tick = 0
        makespan = 0

        def inject(tick_: int) -> None:
            nonlocal next_req
            req = requests[next_req]
            next_req += 1
            p = _PendingQuery(req=req, inject_tick=tick_, remaining=0)
            outstanding[req.seq] = p
            for task in self._make_tasks(p, tick_):
                try:
                    self.router.route(task, self.registry.current)
                except BackpressureError:
                    overflow.append(task)

        inject_on_completion = 0

        while True:
            if tick > max_ticks:
                raise RuntimeError(f"simulation exceeded {max_ticks} ticks")

            self.monitor.advance_window(tick)

            # complete due tasks first so their queries can retire this tick
            while finishing and finishing[0][0] <= tick:
                done_tick, _, widx, task, out = heapq.heappop(finishing)
                self.monitor.record_completion(
                    widx, task.mapping_id, out.counters, done_tick - task.submit_us
                )
                self.registry.retire(task.epoch)
                task.handle.set_result(out, completed_us=done_tick)
                p = outstanding[task.seq]
                p.parts.append(out.hits)
                p.remaining -= 1
                if p.remaining == 0:
                    p.done_tick = done_tick
                    latencies[p.req.seq] = done_tick - p.inject_tick
                    if hits is not None:
                        if p.req.kind == "hnsw":
                            hits[p.req.seq] = p.parts[0]
                        else:
                            hits[p.req.seq] = merge_topk(p.parts, p.req.query.k)
                    del outstanding[task.seq]
                    completions += 1
                    makespan = max(makespan, done_tick)
                    if closed:
                        inject_on_completion += 1

            # retry queue-overflow tasks before new arrivals
            if overflow:
                still: list[Task] = []
                for task in overflow:
                    try:
                        self.router.route(task, self.registry.current)
                    except BackpressureError:
                        still.append(task)
                overflow = still

            if closed:
                while (
                    next_req < len(requests)
                    and len(outstanding) < closed_loop_clients
                ):
                    inject(tick)
                inject_on_completion = 0
            elif arrivals_per_tick is not None:
                credit += arrivals_per_tick
                while credit >= 1.0 and next_req < len(requests):
                    inject(tick)
                    credit -= 1.0
            else:
                while (
                    next_req < len(requests)
                    and requests[next_req].ts_us * ts_scale <= tick
                ):
                    inject(tick)

            if next_req >= len(requests) and not outstanding and not finishing and not overflow:
                break

            for widx, ws in enumerate(self.workers):
                if busy_until[widx] > tick:
                    continue
                task = ws.acquire(self._victims, self.policy, probe_log)
                if task is None and self.pool is not None:
                    task = self.pool.pop_local()
                if task is None:
                    continue
                self.registry.assert_live(task.epoch)
                out = task.functor(task.query)
                ws.stats.executed += 1
                if self.cache is not None:
                    blocks = task_block_trace(
                        task.mapping_id, out.counters, out.touched, self.cache.block_bytes
                    )
                    self.cache.access(ws.ccd, blocks)
                cost = max(1, -(-estimate_traffic(out.counters) // self.bytes_per_tick))
                busy_until[widx] = tick + cost
                fin_seq += 1
                heapq.heappush(finishing, (tick + cost, fin_seq, widx, task, out))

            tick += 1

        return SimReport(
            completions=completions,
            makespan_ticks=makespan,
            latencies_ticks=latencies,
            steals=steal_stats(self.workers),
            cache=self.cache.report() if self.cache is not None else None,
            epochs_published=self.monitor.epochs_published,
            hits=hits,
            probe_log=probe_log,
        )
