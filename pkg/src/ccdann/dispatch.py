"""Traffic-balanced mapping of dispatch keys onto CCDs, with epoched snapshots.

The monitor turns completion counters into byte-traffic estimates, and each
window rebuilds the key->CCD map with a two-ended sweep: hottest remaining
key goes to the least-loaded CCD and, when it fits the residual budget, the
coldest remaining key rides along.  New submissions see a fresh snapshot
immediately; an old snapshot is reclaimed only after its last in-flight task
retires.
"""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable

from .tasks import KIND_HNSW, MappingId, WorkCounters
from .topology import Topology
from .vectors import ELEMENT_BYTES

log = logging.getLogger(__name__)

S_ID_BYTES = 4  # adjacency ids are uint32-sized
DELTA_META = 0  # top-k heap / visited-list bookkeeping; under 1%, dropped


def estimate_hnsw_traffic(nodes_touched: int, dim: int, degree: int) -> int:
    """Bytes read by a graph search touching ``nodes_touched`` nodes.

    Each touch reads the node vector plus its adjacency row.
    """
    if nodes_touched < 0:
        raise ValueError("nodes_touched must be >= 0")
    return nodes_touched * (dim * ELEMENT_BYTES + degree * S_ID_BYTES) + DELTA_META


def estimate_ivf_traffic(scanned: int, dim: int) -> int:
    """Bytes read by scanning ``scanned`` vectors of one inverted list."""
    if scanned < 0:
        raise ValueError("scanned must be >= 0")
    return scanned * dim * ELEMENT_BYTES


def estimate_traffic(counters: WorkCounters) -> int:
    if counters.kind == KIND_HNSW:
        return estimate_hnsw_traffic(counters.amount, counters.dim, counters.degree)
    return estimate_ivf_traffic(counters.amount, counters.dim)


@dataclass
class TrafficEstimate:
    """Windowed per-key traffic: estimated bytes plus completion count."""

    id: MappingId
    bytes: int
    events: int


@dataclass(frozen=True)
class PlacementRecord:
    """One placement step of the pairing sweep, for audits and map dumps."""

    hot: MappingId
    hot_bytes: int
    cold: MappingId | None
    cold_bytes: int
    ccd: int
    load_before: int
    cap: float


@dataclass
class CcdMap:
    """Published snapshot of the key->CCD assignment for one epoch."""

    epoch: int
    assign: dict[MappingId, int]
    loads: list[int]
    mu: float
    placements: list[PlacementRecord] = field(default_factory=list)


def build_map(traffic: Iterable[TrafficEstimate], m: int, epoch: int = 0) -> CcdMap:
    """Balanced hot-cold pairing sweep.

    Sort keys by traffic descending; repeatedly place the hottest remaining
    key on the least-loaded CCD and pair it with the coldest remaining key
    iff that key fits within ``max(0, mu - load - hot)``.  Ties (equal
    traffic, equal load) break toward lower id for determinism.
    """
    if m < 1:
        raise ValueError("need at least one CCD")
    items = sorted(traffic, key=lambda t: (-t.bytes, t.id))
    total = sum(t.bytes for t in items)
    mu = total / m
    loads = [0] * m
    assign: dict[MappingId, int] = {}
    placements: list[PlacementRecord] = []

    i, j = 0, len(items) - 1
    while i <= j:
        r = min(range(m), key=lambda c: (loads[c], c))
        hot = items[i]
        i += 1
        cap = max(0.0, mu - loads[r] - hot.bytes)
        load_before = loads[r]
        cold = None
        if i <= j and items[j].bytes <= cap:
            cold = items[j]
            j -= 1
            assign[hot.id] = r
            assign[cold.id] = r
            loads[r] += hot.bytes + cold.bytes
        else:
            assign[hot.id] = r
            loads[r] += hot.bytes
        placements.append(
            PlacementRecord(
                hot=hot.id,
                hot_bytes=hot.bytes,
                cold=cold.id if cold else None,
                cold_bytes=cold.bytes if cold else 0,
                ccd=r,
                load_before=load_before,
                cap=cap,
            )
        )
    return CcdMap(epoch=epoch, assign=assign, loads=loads, mu=mu, placements=placements)


def _mix64(x: int) -> int:
    x &= 0xFFFFFFFFFFFFFFFF
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9 & 0xFFFFFFFFFFFFFFFF
    x = (x ^ (x >> 27)) * 0x94D049BB133111EB & 0xFFFFFFFFFFFFFFFF
    return x ^ (x >> 31)


def stable_hash(mid: MappingId) -> int:
    """Process-independent hash of a dispatch key (cold-start placement)."""
    h = _mix64(mid.kind + 0x9E3779B97F4A7C15)
    h = _mix64(h ^ (mid.table & 0xFFFFFFFFFFFFFFFF))
    h = _mix64(h ^ (mid.cluster & 0xFFFFFFFFFFFFFFFF))
    return h


def pick_ccd(mid: MappingId, snapshot: CcdMap, topo: Topology) -> int:
    """Sticky mapped CCD when known; deterministic hash fallback otherwise."""
    ccd = snapshot.assign.get(mid)
    if ccd is not None:
        return ccd
    return stable_hash(mid) % topo.ccd_count


class SnapshotRegistry:
    """Epoch bookkeeping: which map each task was stamped with, and when an
    old map may be reclaimed (only after its last stamped task retires)."""

    def __init__(self, on_reclaim: Callable[[int], None] | None = None):
        self._lock = threading.Lock()
        self._current = CcdMap(epoch=0, assign={}, loads=[], mu=0.0)
        self._live: dict[int, CcdMap] = {0: self._current}
        self._inflight: dict[int, int] = {0: 0}
        self._reclaimed: list[int] = []
        self._on_reclaim = on_reclaim

    @property
    def current(self) -> CcdMap:
        return self._current

    @property
    def reclaimed_epochs(self) -> list[int]:
        with self._lock:
            return list(self._reclaimed)

    def live_epochs(self) -> list[int]:
        with self._lock:
            return sorted(self._live)

    def stamp(self) -> CcdMap:
        """Register one in-flight task under the current epoch's snapshot."""
        with self._lock:
            snap = self._current
            self._inflight[snap.epoch] += 1
            return snap

    def assert_live(self, epoch: int) -> None:
        with self._lock:
            if epoch not in self._live:
                raise AssertionError(f"task executing under reclaimed epoch {epoch}")

    def retire(self, epoch: int) -> None:
        """Drop one in-flight count; reclaim the epoch's map when it was
        already superseded and this was its last task."""
        with self._lock:
            left = self._inflight[epoch] - 1
            if left < 0:
                raise AssertionError(f"epoch {epoch} retired more tasks than stamped")
            self._inflight[epoch] = left
            if left == 0 and epoch != self._current.epoch:
                self._reclaim_locked(epoch)

    def publish(self, new_map: CcdMap) -> None:
        """Swap the serving snapshot; old epochs with no in-flight work are
        reclaimed immediately, the rest when their last task retires."""
        with self._lock:
            if new_map.epoch <= self._current.epoch:
                raise ValueError("epochs must increase monotonically")
            old = self._current.epoch
            self._current = new_map
            self._live[new_map.epoch] = new_map
            self._inflight.setdefault(new_map.epoch, 0)
            if self._inflight[old] == 0:
                self._reclaim_locked(old)

    def _reclaim_locked(self, epoch: int) -> None:
        del self._live[epoch]
        del self._inflight[epoch]
        self._reclaimed.append(epoch)
        if self._on_reclaim is not None:
            self._on_reclaim(epoch)


@dataclass
class WindowConfig:
    """Remap cadence: window length (runtime clock units) and the minimum
    number of completions below which a window is skipped."""

    window_us: int = 10_000_000
    min_events: int = 1

    def __post_init__(self) -> None:
        if self.window_us <= 0:
            raise ValueError("window_us must be positive")


class _Shard:
    __slots__ = ("lock", "bytes", "events")

    def __init__(self) -> None:
        self.lock = threading.Lock()
        self.bytes: dict[MappingId, int] = {}
        self.events: dict[MappingId, int] = {}


class WorkloadMonitor:
    """Per-worker completion accumulation and the windowed remap driver."""

    def __init__(
        self,
        topo: Topology,
        registry: SnapshotRegistry,
        window: WindowConfig | None = None,
        workers: int | None = None,
        start_us: int = 0,
        on_record: Callable[[MappingId, WorkCounters, int], None] | None = None,
        on_publish: Callable[[CcdMap, dict[MappingId, int]], None] | None = None,
    ):
        self.topo = topo
        self.registry = registry
        self.window = window or WindowConfig()
        self._shards = [_Shard() for _ in range(workers or topo.total_cores)]
        self._window_start = start_us
        self._windows_skipped = 0
        self.epochs_published = 0
        self._on_record = on_record
        self._on_publish = on_publish

    def record_completion(
        self, worker: int, mid: MappingId, counters: WorkCounters, latency_us: int = 0
    ) -> None:
        """Accumulate one completion into the worker's shard (estimate bytes
        via the traffic model; raw counters never cross the window)."""
        est = estimate_traffic(counters)
        shard = self._shards[worker]
        with shard.lock:
            shard.bytes[mid] = shard.bytes.get(mid, 0) + est
            shard.events[mid] = shard.events.get(mid, 0) + 1
        if self._on_record is not None:
            self._on_record(mid, counters, latency_us)

    def window_totals(self) -> dict[MappingId, TrafficEstimate]:
        """Non-destructive merge of the current window's shards."""
        totals: dict[MappingId, TrafficEstimate] = {}
        for shard in self._shards:
            with shard.lock:
                items = list(shard.bytes.items())
                events = dict(shard.events)
            for mid, b in items:
                t = totals.get(mid)
                if t is None:
                    totals[mid] = TrafficEstimate(id=mid, bytes=b, events=events[mid])
                else:
                    t.bytes += b
                    t.events += events[mid]
        return totals

    def _drain(self) -> dict[MappingId, TrafficEstimate]:
        totals: dict[MappingId, TrafficEstimate] = {}
        for shard in self._shards:
            with shard.lock:
                bts, evs = shard.bytes, shard.events
                shard.bytes, shard.events = {}, {}
            for mid, b in bts.items():
                t = totals.get(mid)
                if t is None:
                    totals[mid] = TrafficEstimate(id=mid, bytes=b, events=evs[mid])
                else:
                    t.bytes += b
                    t.events += evs[mid]
        return totals

    def advance_window(self, now_us: int) -> CcdMap | None:
        """Close the window if due: aggregate, rebuild off the serving path,
        publish the next epoch.  Returns the new map, or None."""
        if now_us - self._window_start < self.window.window_us:
            return None
        self._window_start = now_us
        totals = self._drain()
        n_events = sum(t.events for t in totals.values())
        if n_events < self.window.min_events:
            self._windows_skipped += 1
            log.debug("window skipped: %d events < min %d", n_events, self.window.min_events)
            return None
        traffic = sorted(totals.values(), key=lambda t: t.id)
        new_map = build_map(traffic, self.topo.ccd_count, epoch=self.registry.current.epoch + 1)
        self.registry.publish(new_map)
        self.epochs_published += 1
        if self._on_publish is not None:
            self._on_publish(new_map, {t.id: t.bytes for t in traffic})
        return new_map
