"""Per-CCD last-level-cache model: LRU over fixed-size blocks of index data.

Each CCD owns an isolated fully-associative LRU set, mirroring private
chiplet L3; working-set residency is the phenomenon under test, so conflict
misses are deliberately out of scope.  Block ids chunk exactly the data a
task's counters say it read — graph node vectors and adjacency rows, or an
inverted list's row payload — so modeled bytes reconcile with the traffic
estimator.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass

from .tasks import KIND_HNSW, MappingId, WorkCounters
from .vectors import ELEMENT_BYTES
from .dispatch import S_ID_BYTES

DEFAULT_BLOCK_BYTES = 64
DEFAULT_CCD_L3_BYTES = 32 * 1024 * 1024  # per-CCD private L3 on recent parts

# BlockId: (region tag, table, owner node or cluster, block index).
# Stable for the same datum across a whole run.
BlockId = tuple

_REGION_NODE_VEC = 0
_REGION_NODE_ADJ = 1
_REGION_LIST_ROWS = 2


def _span_blocks(nbytes: int, block_bytes: int) -> int:
    return -(-nbytes // block_bytes)


def hnsw_node_blocks(
    table: int, node: int, dim: int, degree: int, block_bytes: int = DEFAULT_BLOCK_BYTES
) -> list[BlockId]:
    """Blocks covering one touched node: its vector and its adjacency row."""
    out = [
        (_REGION_NODE_VEC, table, node, b)
        for b in range(_span_blocks(dim * ELEMENT_BYTES, block_bytes))
    ]
    out.extend(
        (_REGION_NODE_ADJ, table, node, b)
        for b in range(_span_blocks(degree * S_ID_BYTES, block_bytes))
    )
    return out


def ivf_list_blocks(
    table: int, cluster: int, scanned: int, dim: int, block_bytes: int = DEFAULT_BLOCK_BYTES
) -> list[BlockId]:
    """Blocks covering the contiguous row payload of one scanned list."""
    nbytes = scanned * dim * ELEMENT_BYTES
    return [(_REGION_LIST_ROWS, table, cluster, b) for b in range(_span_blocks(nbytes, block_bytes))]


def task_block_trace(
    mid: MappingId,
    counters: WorkCounters,
    touched: list[int] | None,
    block_bytes: int = DEFAULT_BLOCK_BYTES,
) -> list[BlockId]:
    """Expand one executed task into its touched-block stream.

    Graph tasks need the instrumented touched-node list; list scans are
    reconstructed from the scan count alone.
    """
    if counters.kind == KIND_HNSW:
        if touched is None:
            raise ValueError("graph task block trace requires touched-node instrumentation")
        out: list[BlockId] = []
        for node in touched:
            out.extend(
                hnsw_node_blocks(mid.table, node, counters.dim, counters.degree, block_bytes)
            )
        return out
    return ivf_list_blocks(mid.table, mid.cluster, counters.amount, counters.dim, block_bytes)


@dataclass
class CcdCacheStats:
    accesses: int = 0
    misses: int = 0

    @property
    def rate(self) -> float:
        return self.misses / self.accesses if self.accesses else 0.0


@dataclass
class CacheReport:
    per_ccd: list[CcdCacheStats]
    zero_access: bool

    @property
    def accesses(self) -> int:
        return sum(s.accesses for s in self.per_ccd)

    @property
    def misses(self) -> int:
        return sum(s.misses for s in self.per_ccd)

    @property
    def rate(self) -> float:
        return self.misses / self.accesses if self.accesses else 0.0

    def rows(self) -> list[tuple]:
        """Stable tabular form: one row per CCD plus an aggregate row."""
        out = [
            ("ccd", i, s.accesses, s.misses, f"{s.rate:.6f}")
            for i, s in enumerate(self.per_ccd)
        ]
        out.append(("total", "", self.accesses, self.misses, f"{self.rate:.6f}"))
        return out


class LlcModel:
    """Isolated per-CCD LRU block caches; deterministic given access order."""

    def __init__(
        self,
        ccd_count: int,
        capacity_blocks: int,
        block_bytes: int = DEFAULT_BLOCK_BYTES,
    ):
        if ccd_count < 1 or capacity_blocks < 1 or block_bytes < 1:
            raise ValueError("ccd_count, capacity_blocks and block_bytes must be positive")
        self.block_bytes = block_bytes
        self.capacity_blocks = capacity_blocks
        self._sets: list[OrderedDict] = [OrderedDict() for _ in range(ccd_count)]
        self._stats = [CcdCacheStats() for _ in range(ccd_count)]

    @classmethod
    def from_l3_bytes(
        cls,
        ccd_count: int,
        l3_bytes: int = DEFAULT_CCD_L3_BYTES,
        block_bytes: int = DEFAULT_BLOCK_BYTES,
    ) -> "LlcModel":
        return cls(ccd_count, max(1, l3_bytes // block_bytes), block_bytes)

    def access(self, ccd: int, blocks: list[BlockId]) -> tuple[int, int]:
        """LRU-update one CCD with an ordered block stream; returns (hits, misses)."""
        cache = self._sets[ccd]
        stats = self._stats[ccd]
        hits = misses = 0
        cap = self.capacity_blocks
        for b in blocks:
            if b in cache:
                cache.move_to_end(b)
                hits += 1
            else:
                misses += 1
                cache[b] = None
                if len(cache) > cap:
                    cache.popitem(last=False)
        stats.accesses += hits + misses
        stats.misses += misses
        return hits, misses

    def resident(self, ccd: int) -> int:
        return len(self._sets[ccd])

    def report(self) -> CacheReport:
        total = sum(s.accesses for s in self._stats)
        return CacheReport(
            per_ccd=[CcdCacheStats(s.accesses, s.misses) for s in self._stats],
            zero_access=(total == 0),
        )
