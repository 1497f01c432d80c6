"""Minimal HNSW graph index: deterministic build, search, touched-node accounting.

The level-0 best-first search dominates both build and query time, so it is
JIT-compiled (numba) over flat int32 adjacency arrays.  Upper levels hold a
few percent of the nodes and stay in plain Python.  Every search reports the
exact number of distinct nodes whose vector was evaluated — greedy descent
included — which is what the traffic estimator consumes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numba import njit

from .vectors import Hit, VectorSet, dists_sq

DEFAULT_M = 32
DEFAULT_EF_CONSTRUCTION = 500


@njit(inline="always")
def _less(d1, i1, d2, i2):
    return d1 < d2 or (d1 == d2 and i1 < i2)


@njit(inline="always")
def _row_dist(data, row, q):
    s = np.float32(0.0)
    for t in range(data.shape[1]):
        diff = data[row, t] - q[t]
        s += diff * diff
    return s


@njit(inline="always")
def _pair_dist(data, a, b):
    s = np.float32(0.0)
    for t in range(data.shape[1]):
        diff = data[a, t] - data[b, t]
        s += diff * diff
    return s


@njit(cache=True)
def _select_diverse(data, cand_d, cand_i, m):
    """Diversity-pruned neighbor selection over (dist, id)-sorted candidates.

    A candidate is kept only while it is closer to the base point than to
    every neighbor already kept; this preserves the long-range edges that
    keep level 0 connected on clustered data.  May return fewer than m.
    """
    sel_i = np.empty(m, np.int32)
    sel_d = np.empty(m, np.float32)
    cnt = 0
    for t in range(len(cand_i)):
        if cnt >= m:
            break
        c = cand_i[t]
        dc = cand_d[t]
        ok = True
        for s in range(cnt):
            if _pair_dist(data, c, sel_i[s]) < dc:
                ok = False
                break
        if ok:
            sel_i[cnt] = c
            sel_d[cnt] = dc
            cnt += 1
    return sel_d[:cnt], sel_i[:cnt]


@njit(inline="always")
def _heap_push_min(hd, hi, hn, d, i):
    hd[hn] = d
    hi[hn] = i
    pos = hn
    while pos > 0:
        par = (pos - 1) >> 1
        if _less(hd[pos], hi[pos], hd[par], hi[par]):
            hd[pos], hd[par] = hd[par], hd[pos]
            hi[pos], hi[par] = hi[par], hi[pos]
            pos = par
        else:
            break
    return hn + 1


@njit(inline="always")
def _heap_pop_min(hd, hi, hn):
    d = hd[0]
    i = hi[0]
    hn -= 1
    hd[0] = hd[hn]
    hi[0] = hi[hn]
    pos = 0
    while True:
        lc = 2 * pos + 1
        if lc >= hn:
            break
        sm = lc
        rc = lc + 1
        if rc < hn and _less(hd[rc], hi[rc], hd[lc], hi[lc]):
            sm = rc
        if _less(hd[sm], hi[sm], hd[pos], hi[pos]):
            hd[pos], hd[sm] = hd[sm], hd[pos]
            hi[pos], hi[sm] = hi[sm], hi[pos]
            pos = sm
        else:
            break
    return d, i, hn


@njit(inline="always")
def _sift_down_max(hd, hi, hn, pos):
    while True:
        lc = 2 * pos + 1
        if lc >= hn:
            break
        lg = lc
        rc = lc + 1
        if rc < hn and _less(hd[lc], hi[lc], hd[rc], hi[rc]):
            lg = rc
        if _less(hd[pos], hi[pos], hd[lg], hi[lg]):
            hd[pos], hd[lg] = hd[lg], hd[pos]
            hi[pos], hi[lg] = hi[lg], hi[pos]
            pos = lg
        else:
            break


@njit(inline="always")
def _heap_offer_max(hd, hi, hn, cap, d, i):
    """Max-heap bounded at cap; worst (largest (d,i)) sits at the root."""
    if hn < cap:
        hd[hn] = d
        hi[hn] = i
        pos = hn
        while pos > 0:
            par = (pos - 1) >> 1
            if _less(hd[par], hi[par], hd[pos], hi[pos]):
                hd[pos], hd[par] = hd[par], hd[pos]
                hi[pos], hi[par] = hi[par], hi[pos]
                pos = par
            else:
                break
        return hn + 1
    if _less(d, i, hd[0], hi[0]):
        hd[0] = d
        hi[0] = i
        _sift_down_max(hd, hi, hn, 0)
    return hn


@njit(cache=True)
def _search_flat(data, adj, deg, entry, q, ef):
    """Best-first search over one flat adjacency level from a single entry.

    Returns results sorted ascending by (dist, id) plus the ids of every
    node whose distance was evaluated, in first-touch order.
    """
    n = data.shape[0]
    visited = np.zeros(n, np.uint8)
    torder = np.empty(n, np.int32)
    tcount = 0
    cd = np.empty(n + 1, np.float32)
    ci = np.empty(n + 1, np.int32)
    cn = 0
    rd = np.empty(ef + 1, np.float32)
    ri = np.empty(ef + 1, np.int32)
    rn = 0

    d0 = _row_dist(data, entry, q)
    visited[entry] = 1
    torder[tcount] = entry
    tcount += 1
    cn = _heap_push_min(cd, ci, cn, d0, entry)
    rn = _heap_offer_max(rd, ri, rn, ef, d0, entry)

    while cn > 0:
        dc, cc, cn = _heap_pop_min(cd, ci, cn)
        if rn >= ef and _less(rd[0], ri[0], dc, cc):
            break
        for t in range(deg[cc]):
            nb = adj[cc, t]
            if visited[nb]:
                continue
            visited[nb] = 1
            torder[tcount] = nb
            tcount += 1
            dn = _row_dist(data, nb, q)
            if rn < ef or _less(dn, nb, rd[0], ri[0]):
                cn = _heap_push_min(cd, ci, cn, dn, nb)
                rn = _heap_offer_max(rd, ri, rn, ef, dn, nb)

    out_d = np.empty(rn, np.float32)
    out_i = np.empty(rn, np.int32)
    m = rn
    while m > 0:
        out_d[m - 1] = rd[0]
        out_i[m - 1] = ri[0]
        m -= 1
        rd[0] = rd[m]
        ri[0] = ri[m]
        _sift_down_max(rd, ri, m, 0)
    return out_d, out_i, torder[:tcount]


@dataclass
class HnswSearchOutcome:
    """Search result plus the work accounting the dispatcher feeds on."""

    hits: list[Hit]
    nodes_touched: int
    touched: list[int] | None = None


class HnswIndex:
    """Layered small-world graph over a VectorSet.

    Level 0 holds every node as flat ``(n, 2M)`` adjacency; upper levels are
    sparse dicts.  Immutable once built; searches share it freely.
    """

    def __init__(self, vectors: VectorSet, m: int, ef_construction: int, seed: int):
        self.vectors = vectors
        self.m = m
        self.m0 = 2 * m  # level-0 degree cap, standard practice
        self.ef_construction = ef_construction
        self.seed = seed
        n = vectors.count
        self.adj0 = np.full((n, self.m0), -1, dtype=np.int32)
        self.deg0 = np.zeros(n, dtype=np.int32)
        self.levels = np.zeros(n, dtype=np.int32)
        self.upper: list[dict[int, list[int]]] = []  # index 0 -> level 1
        self.entry_point = 0
        self.max_level = 0

    @property
    def count(self) -> int:
        return self.vectors.count

    def neighbors(self, node: int, level: int) -> Sequence[int]:
        if level == 0:
            return self.adj0[node, : self.deg0[node]].tolist()
        lv = self.upper[level - 1] if level - 1 < len(self.upper) else {}
        return lv.get(node, [])


def _level_draws(n: int, m: int, seed: int) -> np.ndarray:
    mult = 1.0 / math.log(m)
    rng = np.random.default_rng(seed)
    u = 1.0 - rng.random(n)  # (0, 1]
    return np.floor(-np.log(u) * mult).astype(np.int32)


def _greedy_step(idx: HnswIndex, level: int, q: np.ndarray, ep: int, touched: set[int]) -> int:
    data = idx.vectors.data
    cur = ep
    touched.add(cur)
    cur_d = float(dists_sq(data[cur : cur + 1], q)[0])
    while True:
        nbrs = idx.neighbors(cur, level)
        if not nbrs:
            return cur
        arr = np.asarray(nbrs, dtype=np.int64)
        dd = dists_sq(data[arr], q)
        touched.update(nbrs)
        best = int(np.lexsort((arr, dd))[0])
        bd, bi = float(dd[best]), int(arr[best])
        if (bd, bi) < (cur_d, cur):
            cur, cur_d = bi, bd
        else:
            return cur


def _search_upper(
    idx: HnswIndex, level: int, q: np.ndarray, ep: int, ef: int, touched: set[int]
) -> list[tuple[float, int]]:
    """Plain best-first search over a sparse upper level (few nodes live here)."""
    import heapq

    data = idx.vectors.data
    d0 = float(dists_sq(data[ep : ep + 1], q)[0])
    touched.add(ep)
    visited = {ep}
    cands = [(d0, ep)]
    res = [(-d0, -ep)]
    while cands:
        dc, cc = heapq.heappop(cands)
        worst_d, worst_i = -res[0][0], -res[0][1]
        if len(res) >= ef and (worst_d, worst_i) < (dc, cc):
            break
        for nb in idx.neighbors(cc, level):
            if nb in visited:
                continue
            visited.add(nb)
            touched.add(nb)
            dn = float(dists_sq(data[nb : nb + 1], q)[0])
            worst_d, worst_i = -res[0][0], -res[0][1]
            if len(res) < ef or (dn, nb) < (worst_d, worst_i):
                heapq.heappush(cands, (dn, nb))
                heapq.heappush(res, (-dn, -nb))
                if len(res) > ef:
                    heapq.heappop(res)
    return sorted((-d, -i) for d, i in res)


def _reselect(idx: HnswIndex, target: int, ids: np.ndarray, dists: np.ndarray, cap: int):
    """Re-run diverse selection for an overflowing adjacency list."""
    order = np.lexsort((ids, dists.astype(np.float64)))
    cd = np.ascontiguousarray(dists[order], dtype=np.float32)
    ci = np.ascontiguousarray(ids[order], dtype=np.int32)
    return _select_diverse(idx.vectors.data, cd, ci, cap)


def _backlink0(idx: HnswIndex, target: int, new: int, dist_new: float) -> None:
    dg = int(idx.deg0[target])
    if dg < idx.m0:
        idx.adj0[target, dg] = new
        idx.deg0[target] = dg + 1
        return
    cur = idx.adj0[target, :dg]
    data = idx.vectors.data
    dd = dists_sq(data[cur], data[target])
    ids = np.append(cur, np.int32(new))
    dv = np.append(dd, np.float32(dist_new))
    _, keep = _reselect(idx, target, ids, dv, idx.m0)
    idx.adj0[target, : len(keep)] = keep
    idx.adj0[target, len(keep):] = -1
    idx.deg0[target] = len(keep)


def _backlink_upper(idx: HnswIndex, level: int, target: int, new: int, dist_new: float) -> None:
    lst = idx.upper[level - 1].setdefault(target, [])
    lst.append(new)
    if len(lst) <= idx.m:
        return
    data = idx.vectors.data
    arr = np.asarray(lst, dtype=np.int32)
    dd = dists_sq(data[arr.astype(np.int64)], data[target])
    _, keep = _reselect(idx, target, arr, dd, idx.m)
    idx.upper[level - 1][target] = [int(v) for v in keep]


def hnsw_build(
    vs: VectorSet,
    m: int = DEFAULT_M,
    ef_construction: int = DEFAULT_EF_CONSTRUCTION,
    seed: int = 0,
) -> HnswIndex:
    """Insert all vectors in row order; fully determined by (data, params, seed).

    Neighbor selection uses diversity pruning (for both new links and
    overflowing back-links); plain closest-first truncation disconnects
    level 0 on clustered data.
    """
    if vs.count < 1:
        raise ValueError("cannot build an index over an empty vector set")
    if m < 2:
        raise ValueError("m must be >= 2")
    if ef_construction < m:
        raise ValueError("ef_construction must be >= m")

    idx = HnswIndex(vs, m, ef_construction, seed)
    idx.levels = _level_draws(vs.count, m, seed)
    idx.entry_point = 0
    idx.max_level = int(idx.levels[0])
    while len(idx.upper) < idx.max_level:
        idx.upper.append({})

    data = vs.data
    sink: set[int] = set()
    for i in range(1, vs.count):
        q = data[i]
        lvl = int(idx.levels[i])
        ep = idx.entry_point
        for level in range(idx.max_level, lvl, -1):
            ep = _greedy_step(idx, level, q, ep, sink)
        for level in range(min(lvl, idx.max_level), -1, -1):
            if level == 0:
                cd, ci, _ = _search_flat(
                    data, idx.adj0, idx.deg0, ep, q, ef_construction
                )
                sd, si = _select_diverse(data, cd, ci, idx.m)
                idx.adj0[i, : len(si)] = si
                idx.deg0[i] = len(si)
                for t in range(len(si)):
                    _backlink0(idx, int(si[t]), i, float(sd[t]))
                ep = int(ci[0])
            else:
                cand = _search_upper(idx, level, q, ep, ef_construction, sink)
                cd = np.asarray([c[0] for c in cand], dtype=np.float32)
                ci = np.asarray([c[1] for c in cand], dtype=np.int32)
                sd, si = _select_diverse(data, cd, ci, idx.m)
                idx.upper[level - 1][i] = [int(v) for v in si]
                for t in range(len(si)):
                    _backlink_upper(idx, level, int(si[t]), i, float(sd[t]))
                ep = cand[0][1]
            sink.clear()
        if lvl > idx.max_level:
            idx.max_level = lvl
            idx.entry_point = i
            while len(idx.upper) < lvl:
                idx.upper.append({})
    return idx


def hnsw_search(
    idx: HnswIndex,
    q,
    k: int,
    ef_search: int,
    record_touched: bool = False,
) -> HnswSearchOutcome:
    """Greedy descent then width-``ef_search`` best-first at level 0."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if ef_search < k:
        raise ValueError("ef_search must be >= k")
    q = np.ascontiguousarray(q, dtype=np.float32)
    if q.shape != (idx.vectors.dim,):
        raise ValueError(f"query dim {q.shape} does not match index dim {idx.vectors.dim}")

    upper_touched: set[int] = set()
    ep = idx.entry_point
    for level in range(idx.max_level, 0, -1):
        ep = _greedy_step(idx, level, q, ep, upper_touched)

    dd, ii, torder = _search_flat(idx.vectors.data, idx.adj0, idx.deg0, ep, q, ef_search)

    ext = idx.vectors.ids
    ranked = sorted((float(dd[t]), int(ext[ii[t]])) for t in range(len(ii)))
    hits = [Hit(id=i, dist=d) for d, i in ranked[:k]]

    flat = torder.tolist()
    touched_rows = len(upper_touched | set(flat))
    touched_list: list[int] | None = None
    if record_touched:
        touched_list = [r for r in sorted(upper_touched)]
        seen = upper_touched
        touched_list.extend(r for r in flat if r not in seen)
    return HnswSearchOutcome(hits=hits, nodes_touched=touched_rows, touched=touched_list)


def calibrate_ef_search(
    idx: HnswIndex,
    queries: np.ndarray,
    k: int,
    target_recall: float,
    oracle: list[list[Hit]],
    max_ef: int = 4096,
) -> int:
    """Smallest ef_search whose mean recall@k over ``queries`` meets the target.

    Exponential bracket then bisection; recall is treated as non-decreasing
    in ef, which holds in aggregate on a fixed index and query sample.
    """

    def recall_of(ef: int) -> float:
        total = 0.0
        for q, exact in zip(queries, oracle):
            got = {h.id for h in hnsw_search(idx, q, k, ef).hits}
            want = {h.id for h in exact}
            total += len(got & want) / max(1, len(want))
        return total / len(oracle)

    max_ef = min(max_ef, idx.count)
    lo = k
    if recall_of(lo) >= target_recall:
        return lo
    hi = lo
    while hi < max_ef:
        hi = min(max_ef, hi * 2)
        if recall_of(hi) >= target_recall:
            break
    else:
        raise ValueError(f"recall target {target_recall} unreachable at ef={max_ef}")
    if recall_of(hi) < target_recall:
        raise ValueError(f"recall target {target_recall} unreachable at ef={max_ef}")
    while lo + 1 < hi:
        mid = (lo + hi) // 2
        if recall_of(mid) >= target_recall:
            hi = mid
        else:
            lo = mid
    return hi
