"""Dense float32 vector storage, distance kernels, and exact-search oracles.

Everything downstream (both index families, the traffic estimators, the
ground-truth checks) measures squared L2 distance over row-major float32
data.  Squared distance is ranking-equivalent to L2 and avoids the square
root.
"""

from __future__ import annotations

import heapq
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

ELEMENT_BYTES = 4  # float32 payload elements
ID_BYTES = 4  # uint32-sized neighbor ids in adjacency lists

_HEADER = struct.Struct("<IQ")  # dim: u32, count: u64


class Hit(NamedTuple):
    """One search result: external id plus squared L2 distance."""

    id: int
    dist: float


@dataclass
class VectorSet:
    """Immutable-by-convention set of float32 vectors with external ids."""

    data: np.ndarray
    ids: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim != 2:
            raise ValueError(f"expected a (count, dim) array, got shape {self.data.shape}")
        if self.ids is None:
            self.ids = np.arange(self.data.shape[0], dtype=np.int64)
        else:
            self.ids = np.asarray(self.ids, dtype=np.int64)
            if self.ids.shape != (self.data.shape[0],):
                raise ValueError("ids length must match vector count")

    @property
    def count(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    @property
    def row_bytes(self) -> int:
        return self.dim * ELEMENT_BYTES


def l2_sq(a, b) -> float:
    """Squared L2 distance between two equal-dimension vectors."""
    a = np.asarray(a, dtype=np.float32)
    b = np.asarray(b, dtype=np.float32)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    d = a - b
    return float(np.dot(d, d))


def l2_sq_scalar(a, b) -> float:
    """Plain-Python reference for the vectorized kernel (float64 accumulate)."""
    if len(a) != len(b):
        raise ValueError(f"dimension mismatch: {len(a)} vs {len(b)}")
    total = 0.0
    for x, y in zip(a, b):
        diff = float(x) - float(y)
        total += diff * diff
    return total


def dists_sq(rows: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Squared L2 from each row to ``q``; float32 in, float32 out."""
    d = rows - q
    return np.einsum("ij,ij->i", d, d)


class TopK:
    """Bounded result collector: keeps the k smallest by (dist, id).

    Worst entry sits on top of a max-heap; ties break toward keeping the
    lower id.
    """

    __slots__ = ("k", "_heap")

    def __init__(self, k: int):
        if k < 1:
            raise ValueError("k must be >= 1")
        self.k = k
        self._heap: list[tuple[float, int]] = []  # (-dist, -id)

    def __len__(self) -> int:
        return len(self._heap)

    def offer(self, dist: float, id_: int) -> bool:
        if len(self._heap) < self.k:
            heapq.heappush(self._heap, (-dist, -id_))
            return True
        worst_d, worst_i = -self._heap[0][0], -self._heap[0][1]
        if (dist, id_) < (worst_d, worst_i):
            heapq.heapreplace(self._heap, (-dist, -id_))
            return True
        return False

    def worst(self) -> tuple[float, int] | None:
        if not self._heap:
            return None
        return -self._heap[0][0], -self._heap[0][1]

    def extract(self) -> list[Hit]:
        """Drain into a list sorted ascending by (dist, id)."""
        out = sorted((-d, -i) for d, i in self._heap)
        self._heap.clear()
        return [Hit(id=i, dist=d) for d, i in out]


def brute_force_topk(vs: VectorSet, q, k: int) -> list[Hit]:
    """Exact k nearest rows by (dist, id) — the oracle every index answers to."""
    if vs.count == 0:
        raise ValueError("cannot search an empty vector set")
    if k < 1:
        raise ValueError("k must be >= 1")
    q = np.asarray(q, dtype=np.float32)
    if q.shape != (vs.dim,):
        raise ValueError(f"query dim {q.shape} does not match set dim {vs.dim}")
    d = dists_sq(vs.data, q).astype(np.float64)
    order = np.lexsort((vs.ids, d))[: min(k, vs.count)]
    return [Hit(id=int(vs.ids[i]), dist=float(d[i])) for i in order]


def recall_at_k(approx: list[Hit], exact: list[Hit]) -> float:
    """Fraction of the exact ids present in the approximate result."""
    if not exact:
        return 1.0
    exact_ids = {h.id for h in exact}
    got = sum(1 for h in approx if h.id in exact_ids)
    return got / len(exact_ids)


def write_dataset(path: str | Path, vs: VectorSet) -> None:
    """Little-endian binary dump: u32 dim, u64 count, count*dim float32."""
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(vs.dim, vs.count))
        fh.write(np.ascontiguousarray(vs.data, dtype="<f4").tobytes())


def read_dataset(path: str | Path) -> VectorSet:
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        if len(head) != _HEADER.size:
            raise ValueError(f"{path}: truncated dataset header")
        dim, count = _HEADER.unpack(head)
        if dim == 0:
            raise ValueError(f"{path}: dim must be positive")
        payload = fh.read(dim * count * ELEMENT_BYTES)
    if len(payload) != dim * count * ELEMENT_BYTES:
        raise ValueError(f"{path}: truncated dataset payload")
    data = np.frombuffer(payload, dtype="<f4").reshape(count, dim)
    return VectorSet(data=data.copy())


def gen_gaussian_mixture(
    count: int,
    dim: int,
    n_clusters: int = 8,
    seed: int = 0,
    center_spread: float = 10.0,
    cluster_std: float = 1.0,
) -> VectorSet:
    """Deterministic synthetic data: equal-weight Gaussian blobs."""
    if count < 1 or dim < 1 or n_clusters < 1:
        raise ValueError("count, dim and n_clusters must be positive")
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((n_clusters, dim)) * center_spread
    assign = rng.integers(0, n_clusters, size=count)
    data = centers[assign] + rng.standard_normal((count, dim)) * cluster_std
    return VectorSet(data=data.astype(np.float32))
