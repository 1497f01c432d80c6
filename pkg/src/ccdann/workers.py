"""Per-core workers: bounded task deques, steal policies, the acquire step.

The same acquire logic drives both the threaded runtime and the
deterministic simulator: pop the own queue first; otherwise steal, with the
victim order decided by the active policy.  The topology-aware policy probes
same-CCD cores before any cross-CCD core; the blind policy probes everyone
in seeded-random order; the baseline policy never steals.
"""

from __future__ import annotations

import random
import threading
from collections import deque
from dataclasses import dataclass, field
from enum import Enum

from .tasks import BackpressureError, Task
from .topology import NeighborSets

DEFAULT_QUEUE_CAPACITY = 4096


class SchedMode(Enum):
    V0 = "v0"  # round-robin dispatch, no stealing (shared pool for list scans)
    V1 = "v1"  # round-robin dispatch + blind work stealing
    V2 = "v2"  # traffic-mapped dispatch + CCD-hierarchical stealing

    @classmethod
    def parse(cls, text: str) -> "SchedMode":
        try:
            return cls(text.lower())
        except ValueError:
            raise ValueError(f"unknown mode {text!r} (expected v0|v1|v2)") from None


@dataclass
class StealPolicy:
    mode: SchedMode
    # Optional gate: hold back cross-CCD stealing until the worker has come
    # up empty this many consecutive rounds.  Off by default.
    cross_gate: bool = False
    gate_rounds: int = 8


class TaskDeque:
    """Bounded two-ended task queue.

    Producers append at the back; the owner consumes oldest-first from the
    front; thieves take from the back — the end opposite the owner.  A plain
    lock keeps the semantics obvious; contention is negligible at the rates
    this runtime sees.
    """

    __slots__ = ("_lock", "_items", "capacity")

    def __init__(self, capacity: int = DEFAULT_QUEUE_CAPACITY):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._lock = threading.Lock()
        self._items: deque[Task] = deque()

    def __len__(self) -> int:
        return len(self._items)

    def push(self, task: Task) -> bool:
        with self._lock:
            if len(self._items) >= self.capacity:
                return False
            self._items.append(task)
            return True

    def pop_local(self) -> Task | None:
        with self._lock:
            if not self._items:
                return None
            return self._items.popleft()

    def steal(self) -> Task | None:
        with self._lock:
            if not self._items:
                return None
            return self._items.pop()


@dataclass
class WorkerStats:
    executed: int = 0
    steals_intra: int = 0
    steals_cross: int = 0
    steal_attempts_failed: int = 0  # acquire rounds that probed and found nothing


@dataclass
class ProbeRecord:
    """One acquire round, as seen by the single-stepped harness."""

    core: int
    popped_local: bool
    intra_probes: list[tuple[int, bool]] = field(default_factory=list)
    cross_probes: list[tuple[int, bool]] = field(default_factory=list)
    got_cross: bool = False


class WorkerState:
    """One core's scheduling state; owned by exactly one executor."""

    def __init__(
        self,
        core: int,
        ccd: int,
        neighbors: NeighborSets,
        seed: int = 0,
        capacity: int = DEFAULT_QUEUE_CAPACITY,
    ):
        self.core = core
        self.ccd = ccd
        self.deque = TaskDeque(capacity)
        self.stats = WorkerStats()
        self.intra = tuple(sorted(neighbors.intra[core]))
        self.cross = neighbors.cross[core]
        self._all_others = tuple(sorted(set(self.intra) | set(self.cross)))
        self._rot = 0
        self._rng = random.Random((seed << 20) ^ core)
        self.idle_rounds = 0

    def _rotated(self, seq: tuple[int, ...]) -> list[int]:
        if not seq:
            return []
        r = self._rot % len(seq)
        return list(seq[r:]) + list(seq[:r])

    def acquire(
        self,
        victims: dict[int, TaskDeque],
        policy: StealPolicy,
        probe_log: list[ProbeRecord] | None = None,
    ) -> Task | None:
        """One scheduling round: own queue, then steal per policy."""
        rec = ProbeRecord(core=self.core, popped_local=False) if probe_log is not None else None
        task = self.deque.pop_local()
        if task is not None:
            if rec is not None:
                rec.popped_local = True
                probe_log.append(rec)
            self.idle_rounds = 0
            return task

        if policy.mode is SchedMode.V0:
            if rec is not None:
                probe_log.append(rec)
            self.idle_rounds += 1
            return None

        self._rot += 1
        if policy.mode is SchedMode.V1:
            order = list(self._all_others)
            self._rng.shuffle(order)
            for victim in order:
                task = victims[victim].steal()
                hit = task is not None
                if rec is not None:
                    if victim in self.intra:
                        rec.intra_probes.append((victim, hit))
                    else:
                        rec.cross_probes.append((victim, hit))
                if hit:
                    if victim in self.intra:
                        self.stats.steals_intra += 1
                    else:
                        self.stats.steals_cross += 1
                        if rec is not None:
                            rec.got_cross = True
                    if rec is not None:
                        probe_log.append(rec)
                    self.idle_rounds = 0
                    return task
        else:  # V2: same-CCD victims first, cross-CCD only afterwards
            for victim in self._rotated(self.intra):
                task = victims[victim].steal()
                hit = task is not None
                if rec is not None:
                    rec.intra_probes.append((victim, hit))
                if hit:
                    self.stats.steals_intra += 1
                    if rec is not None:
                        probe_log.append(rec)
                    self.idle_rounds = 0
                    return task
            gate_open = not policy.cross_gate or self.idle_rounds >= policy.gate_rounds
            if gate_open:
                for victim in self._rotated(self.cross):
                    task = victims[victim].steal()
                    hit = task is not None
                    if rec is not None:
                        rec.cross_probes.append((victim, hit))
                    if hit:
                        self.stats.steals_cross += 1
                        if rec is not None:
                            rec.got_cross = True
                            probe_log.append(rec)
                        self.idle_rounds = 0
                        return task

        self.stats.steal_attempts_failed += 1
        self.idle_rounds += 1
        if rec is not None:
            probe_log.append(rec)
        return None


def enqueue_to_ccd(task: Task, ccd_workers: list[WorkerState]) -> int:
    """Place a task on the shortest queue of the CCD (ties: lowest core id).

    A full shortest queue spills to the next-shortest; only a fully
    saturated CCD raises.
    """
    order = sorted(ccd_workers, key=lambda w: (len(w.deque), w.core))
    for w in order:
        if w.deque.push(task):
            return w.core
    raise BackpressureError(
        f"all {len(ccd_workers)} core queues of CCD {ccd_workers[0].ccd} are full"
    )


@dataclass
class StealSummary:
    executed: int
    steals_intra: int
    steals_cross: int
    steal_attempts_failed: int

    @property
    def cross_ratio(self) -> float:
        return self.steals_cross / max(1, self.steals_intra + self.steals_cross)


def steal_stats(workers: list[WorkerState]) -> StealSummary:
    return StealSummary(
        executed=sum(w.stats.executed for w in workers),
        steals_intra=sum(w.stats.steals_intra for w in workers),
        steals_cross=sum(w.stats.steals_cross for w in workers),
        steal_attempts_failed=sum(w.stats.steal_attempts_failed for w in workers),
    )
