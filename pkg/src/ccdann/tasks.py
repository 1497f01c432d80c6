"""Task submission domain types shared by the threaded and simulated engines."""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from .vectors import Hit

KIND_HNSW = 0
KIND_IVF_LIST = 1


class ShutdownError(RuntimeError):
    """Submission rejected because the runtime has stopped intake."""


class BackpressureError(RuntimeError):
    """Every eligible core queue was full."""


class MappingId(NamedTuple):
    """Unified dispatch key: a whole graph table, or one inverted list.

    Tuple ordering gives the deterministic total order used for stable
    iteration and map dumps.
    """

    kind: int
    table: int
    cluster: int = -1

    @classmethod
    def hnsw_table(cls, table: int) -> "MappingId":
        return cls(KIND_HNSW, table, -1)

    @classmethod
    def ivf_list(cls, table: int, cluster: int) -> "MappingId":
        return cls(KIND_IVF_LIST, table, cluster)

    def __str__(self) -> str:
        if self.kind == KIND_HNSW:
            return f"hnsw:{self.table}"
        return f"ivf:{self.table}.{self.cluster}"


@dataclass
class Query:
    """One search request; the filter tag and client id are carried opaquely."""

    vector: np.ndarray
    k: int
    filter_tag: object | None = None
    client: object | None = None
    arrival_us: int = 0

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ValueError("k must be >= 1")


@dataclass
class WorkCounters:
    """Work observed by one executed task, as the traffic estimator needs it."""

    kind: int  # KIND_HNSW or KIND_IVF_LIST
    amount: int  # nodes touched (graph) or vectors scanned (list)
    dim: int
    degree: int = 0  # graph out-degree bound; unused for list scans


@dataclass
class TaskOutput:
    """What a search functor returns to the runtime."""

    hits: list[Hit]
    counters: WorkCounters
    touched: list[int] | None = None  # node ids in touch order, when instrumented


SearchFunctor = Callable[[Query], TaskOutput]


class TaskHandle:
    """Await point for one submitted task; result or error lands exactly once."""

    __slots__ = ("_event", "_output", "_error", "completed_us", "submit_us")

    def __init__(self, submit_us: int = 0):
        self._event = threading.Event()
        self._output: TaskOutput | None = None
        self._error: BaseException | None = None
        self.completed_us = 0
        self.submit_us = submit_us

    def set_result(self, output: TaskOutput, completed_us: int = 0) -> None:
        if self._event.is_set():
            raise RuntimeError("task completion signalled twice")
        self._output = output
        self.completed_us = completed_us
        self._event.set()

    def set_error(self, error: BaseException, completed_us: int = 0) -> None:
        if self._event.is_set():
            raise RuntimeError("task completion signalled twice")
        self._error = error
        self.completed_us = completed_us
        self._event.set()

    def done(self) -> bool:
        return self._event.is_set()

    def wait(self, timeout: float | None = None) -> TaskOutput:
        if not self._event.wait(timeout):
            raise TimeoutError("task did not complete in time")
        if self._error is not None:
            raise self._error
        assert self._output is not None
        return self._output


@dataclass
class Task:
    """A packaged search bound to its dispatch key and mapping epoch."""

    mapping_id: MappingId
    query: Query
    functor: SearchFunctor
    epoch: int
    handle: TaskHandle
    submit_us: int = 0
    seq: int = field(default=0, compare=False)
