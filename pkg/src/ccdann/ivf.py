"""IVF-Flat index: seeded k-means partition plus exact per-list scans.

The per-list scan is the unit of intra-query decomposition upstream, so it
reports exactly how many vectors it evaluated.  k-means is hand-rolled
(k-means++ seeding, Lloyd iterations, deterministic empty-cluster repair)
because the whole build must be reproducible from a single seed.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass
from itertools import islice

import numpy as np

from .vectors import Hit, VectorSet, dists_sq

DEFAULT_KMEANS_ITERS = 20

NLIST_MIN = 128
NLIST_MAX = 8192


def default_nlist(count: int) -> int:
    """Cluster-count schedule by table size, clamped to [128, 8192]."""
    by_size = int(round(4 * math.sqrt(count)))
    return max(1, min(count, min(NLIST_MAX, max(NLIST_MIN, by_size))))


@dataclass
class IvfIndex:
    """nlist centroids plus per-cluster row-index lists over a VectorSet."""

    vectors: VectorSet
    centroids: VectorSet
    lists: list[np.ndarray]  # row indices per cluster, ascending

    @property
    def nlist(self) -> int:
        return self.centroids.count

    def list_size(self, cluster: int) -> int:
        return len(self.lists[cluster])


@dataclass
class ListScanOutcome:
    """Local top-k of one inverted list plus the exact scan count."""

    local_hits: list[Hit]
    scanned: int


def _full_dist_matrix(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Squared distances (rows x centroids) via the expanded product."""
    x64 = x.astype(np.float64)
    c64 = c.astype(np.float64)
    d2 = (
        (x64 * x64).sum(axis=1)[:, None]
        + (c64 * c64).sum(axis=1)[None, :]
        - 2.0 * (x64 @ c64.T)
    )
    np.maximum(d2, 0.0, out=d2)
    return d2


def _kmeans_pp(x: np.ndarray, nlist: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = np.empty((nlist, x.shape[1]), dtype=np.float64)
    first = int(rng.integers(n))
    centers[0] = x[first]
    d2 = ((x.astype(np.float64) - centers[0]) ** 2).sum(axis=1)
    for j in range(1, nlist):
        total = float(d2.sum())
        if total <= 0.0:
            pick = int(rng.integers(n))  # all remaining mass on duplicates
        else:
            r = rng.random() * total
            pick = int(np.searchsorted(np.cumsum(d2), r))
            pick = min(pick, n - 1)
        centers[j] = x[pick]
        nd = ((x.astype(np.float64) - centers[j]) ** 2).sum(axis=1)
        np.minimum(d2, nd, out=d2)
    return centers


def ivf_build(
    vs: VectorSet,
    nlist: int | None = None,
    seed: int = 0,
    max_iters: int = DEFAULT_KMEANS_ITERS,
) -> IvfIndex:
    """Partition rows into nlist clusters; deterministic for a fixed seed."""
    if vs.count == 0:
        raise ValueError("cannot build an index over an empty vector set")
    if nlist is None:
        nlist = default_nlist(vs.count)
    if not 1 <= nlist <= vs.count:
        raise ValueError(f"nlist must be in [1, {vs.count}], got {nlist}")
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")

    x = vs.data
    rng = np.random.default_rng(seed)
    centers = _kmeans_pp(x, nlist, rng)

    assign = np.full(vs.count, -1, dtype=np.int64)
    for _ in range(max_iters):
        d2 = _full_dist_matrix(x, centers)
        new_assign = d2.argmin(axis=1)

        # deterministic empty-cluster repair: steal the farthest member of
        # the largest cluster (ties -> lowest ids)
        counts = np.bincount(new_assign, minlength=nlist)
        for empty in np.flatnonzero(counts == 0):
            big = int(counts.argmax())
            members = np.flatnonzero(new_assign == big)
            far = members[np.lexsort((members, -d2[members, big]))[0]]
            new_assign[far] = empty
            counts[big] -= 1
            counts[empty] += 1

        converged = bool((new_assign == assign).all())
        assign = new_assign
        for j in range(nlist):
            members = np.flatnonzero(assign == j)
            if len(members):
                centers[j] = x[members].mean(axis=0, dtype=np.float64)
        if converged:
            break

    lists = [np.flatnonzero(assign == j).astype(np.int64) for j in range(nlist)]
    centroids = VectorSet(data=centers.astype(np.float32))
    return IvfIndex(vectors=vs, centroids=centroids, lists=lists)


def ivf_select_lists(idx: IvfIndex, q, nprobe: int) -> list[int]:
    """The nprobe cluster ids nearest to q, ascending by (dist, id)."""
    if not 1 <= nprobe <= idx.nlist:
        raise ValueError(f"nprobe must be in [1, {idx.nlist}], got {nprobe}")
    q = np.asarray(q, dtype=np.float32)
    d = dists_sq(idx.centroids.data, q).astype(np.float64)
    order = np.lexsort((np.arange(idx.nlist), d))[:nprobe]
    return [int(c) for c in order]


def ivf_scan_list(idx: IvfIndex, cluster: int, q, k: int) -> ListScanOutcome:
    """Exact top-k within one inverted list; pure, safe to run concurrently."""
    if not 0 <= cluster < idx.nlist:
        raise ValueError(f"invalid cluster id {cluster}")
    rows = idx.lists[cluster]
    if len(rows) == 0:
        return ListScanOutcome(local_hits=[], scanned=0)
    q = np.asarray(q, dtype=np.float32)
    d = dists_sq(idx.vectors.data[rows], q).astype(np.float64)
    ext = idx.vectors.ids[rows]
    order = np.lexsort((ext, d))[: min(k, len(rows))]
    hits = [Hit(id=int(ext[i]), dist=float(d[i])) for i in order]
    return ListScanOutcome(local_hits=hits, scanned=len(rows))


def merge_topk(parts: list[list[Hit]], k: int) -> list[Hit]:
    """k-way merge of individually sorted hit lists; global smallest k."""
    merged = heapq.merge(*parts, key=lambda h: (h.dist, h.id))
    return list(islice(merged, k))


def calibrate_nprobe(
    idx: IvfIndex,
    queries: np.ndarray,
    k: int,
    target_recall: float,
    oracle: list[list[Hit]],
) -> int:
    """Smallest nprobe meeting the recall target; recall is monotone in nprobe."""

    def recall_of(nprobe: int) -> float:
        total = 0.0
        for q, exact in zip(queries, oracle):
            parts = [
                ivf_scan_list(idx, c, q, k).local_hits
                for c in ivf_select_lists(idx, q, nprobe)
            ]
            got = {h.id for h in merge_topk(parts, k)}
            want = {h.id for h in exact}
            total += len(got & want) / max(1, len(want))
        return total / len(oracle)

    lo, hi = 1, idx.nlist
    if recall_of(lo) >= target_recall:
        return lo
    while lo < hi:
        mid = (lo + hi) // 2
        if recall_of(mid) >= target_recall:
            hi = mid
        else:
            lo = mid + 1
    if recall_of(hi) < target_recall:
        raise ValueError(f"recall target {target_recall} unreachable at nprobe={idx.nlist}")
    return hi
