"""Synthetic workload: Zipf-skewed, rotation-driven traces plus the replayer.

Traces reproduce the access patterns the runtime is built to exploit: a few
hot tables dominate traffic, hot/cold roles migrate between windows, and
query vectors are perturbations of stored rows so repeated queries revisit
the same index regions.  The trace file is JSON Lines (one event per line)
with a JSON sidecar describing the tables; both are byte-stable for a seed.
"""

from __future__ import annotations

import json
import math
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .tasks import Query
from .vectors import Hit, VectorSet

DEFAULT_QUERY_NOISE = 0.05


def zipf_weights(n: int, s: float) -> np.ndarray:
    """Normalized rank weights w_i proportional to (i+1)^-s."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if s < 0:
        raise ValueError("s must be >= 0")
    w = np.arange(1, n + 1, dtype=np.float64) ** (-s)
    return w / w.sum()


@dataclass
class TableSpec:
    """One table in a trace/benchmark: index family plus shape and knobs."""

    table: int
    kind: str  # "hnsw" | "ivf"
    rows: int
    dim: int
    m: int = 32
    ef_construction: int = 500
    ef_search: int = 64
    nlist: int | None = None
    nprobe: int | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("hnsw", "ivf"):
            raise ValueError(f"unknown table kind {self.kind!r}")


@dataclass
class TraceSpec:
    tables: list[TableSpec]
    skew_s: float = 1.0
    rotation_period_us: int = 1_000_000
    rotation_fraction: float = 0.2
    duration_us: int = 1_000_000
    qps: float = 1000.0
    k: int = 10
    seed: int = 0
    query_noise: float = DEFAULT_QUERY_NOISE

    def n_events(self) -> int:
        return int(round(self.duration_us * self.qps / 1e6))


@dataclass
class Request:
    """A materialized trace event, ready to run against either engine."""

    seq: int
    ts_us: int
    table: int
    kind: str
    query: Query
    nprobe: int | None = None


def _rotate_ranks(perm: np.ndarray, fraction: float, rng: np.random.Generator) -> np.ndarray:
    """Re-rank a fraction of tables: chosen slots get their ranks shuffled."""
    n = len(perm)
    k = int(round(fraction * n))
    if k < 2:
        return perm
    slots = np.sort(rng.choice(n, size=k, replace=False))
    sub = perm[slots]
    perm = perm.copy()
    perm[slots] = sub[rng.permutation(k)]
    return perm


def iter_trace_events(spec: TraceSpec) -> Iterator[dict]:
    """Deterministic event stream; the file writer serializes these as-is.

    Rank permutations assign Zipf mass to tables and are partially re-drawn
    each rotation period; within a table, rows are sampled from a per-table
    Zipf over a hidden hotspot ordering, giving the within-table locality
    real query logs show.
    """
    n_tables = len(spec.tables)
    if n_tables < 1:
        raise ValueError("trace needs at least one table")
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0xA11CE]))
    weights = zipf_weights(n_tables, spec.skew_s)
    perm = rng.permutation(n_tables)  # perm[rank] = table index

    row_rngs = [
        np.random.default_rng(np.random.SeedSequence([spec.seed, 0xB0B, t.table]))
        for t in spec.tables
    ]
    row_orders = [rng_t.permutation(t.rows) for rng_t, t in zip(row_rngs, spec.tables)]
    row_cdfs = [np.cumsum(zipf_weights(t.rows, spec.skew_s)) for t in spec.tables]

    total = spec.n_events()
    period_start = 0
    seq = 0
    while seq < total:
        period_end_ts = period_start + spec.rotation_period_us
        # events whose timestamp falls inside this rotation period
        batch = []
        while seq + len(batch) < total:
            ts = int(round((seq + len(batch)) * 1e6 / spec.qps))
            if ts >= period_end_ts:
                break
            batch.append(ts)
        if not batch:
            period_start = period_end_ts
            perm = _rotate_ranks(perm, spec.rotation_fraction, rng)
            continue
        p_by_table = np.empty(n_tables)
        p_by_table[perm] = weights
        choices = rng.choice(n_tables, size=len(batch), p=p_by_table)
        for ts, ti in zip(batch, choices):
            t = spec.tables[int(ti)]
            u = row_rngs[int(ti)].random()
            rank = int(np.searchsorted(row_cdfs[int(ti)], u))
            rank = min(rank, t.rows - 1)
            row = int(row_orders[int(ti)][rank])
            yield {
                "ts_us": ts,
                "table": t.table,
                "row": row,
                "qi": seq,
                "k": spec.k,
            }
            seq += 1
        if seq < total:
            period_start = period_end_ts
            perm = _rotate_ranks(perm, spec.rotation_fraction, rng)


def trace_header_path(trace_path: str | Path) -> Path:
    return Path(f"{trace_path}.header.json")


def generate_trace(spec: TraceSpec, out_path: str | Path) -> Path:
    """Write the event file plus its sidecar header; byte-stable per seed."""
    out_path = Path(out_path)
    with open(out_path, "w") as fh:
        for ev in iter_trace_events(spec):
            fh.write(json.dumps(ev, sort_keys=True, separators=(",", ":")))
            fh.write("\n")
    header = {
        "tables": [asdict(t) for t in spec.tables],
        "skew_s": spec.skew_s,
        "rotation_period_us": spec.rotation_period_us,
        "rotation_fraction": spec.rotation_fraction,
        "duration_us": spec.duration_us,
        "qps": spec.qps,
        "k": spec.k,
        "seed": spec.seed,
        "query_noise": spec.query_noise,
    }
    with open(trace_header_path(out_path), "w") as fh:
        json.dump(header, fh, sort_keys=True, indent=1)
        fh.write("\n")
    return out_path


def read_trace_spec(trace_path: str | Path) -> TraceSpec:
    with open(trace_header_path(trace_path)) as fh:
        raw = json.load(fh)
    tables = [TableSpec(**t) for t in raw.pop("tables")]
    return TraceSpec(tables=tables, **raw)


def materialize_requests(
    trace_path: str | Path,
    datasets: dict[int, VectorSet],
    spec: TraceSpec | None = None,
) -> list[Request]:
    """Expand trace events into runnable requests with concrete query vectors.

    Query = stored row + seeded Gaussian noise, so queries cluster around
    the rows the trace marked hot.  Fails fast on a table id the caller has
    no dataset for.
    """
    spec = spec or read_trace_spec(trace_path)
    by_table = {t.table: t for t in spec.tables}
    requests: list[Request] = []
    with open(trace_path) as fh:
        for line in fh:
            if not line.strip():
                continue
            ev = json.loads(line)
            table = ev["table"]
            if table not in by_table or table not in datasets:
                raise KeyError(f"trace references unknown table {table}")
            tspec = by_table[table]
            vs = datasets[table]
            rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0xC0DE, ev["qi"]]))
            vec = vs.data[ev["row"]] + rng.standard_normal(vs.dim).astype(
                np.float32
            ) * np.float32(spec.query_noise)
            q = Query(vector=vec.astype(np.float32), k=ev["k"], arrival_us=ev["ts_us"])
            requests.append(
                Request(
                    seq=ev["qi"],
                    ts_us=ev["ts_us"],
                    table=table,
                    kind=tspec.kind,
                    query=q,
                    nprobe=tspec.nprobe,
                )
            )
    return requests


@dataclass
class ReplayResult:
    latencies_us: np.ndarray  # per request, trace order
    wall_s: float
    completions: int
    errors: int
    hits: dict[int, list[Hit]] = field(default_factory=dict)
    saturated: bool = False

    @property
    def qps(self) -> float:
        return self.completions / self.wall_s if self.wall_s > 0 else 0.0


def _nearest_rank(latencies: np.ndarray, p: float) -> float:
    xs = np.sort(latencies)
    return float(xs[max(0, math.ceil(p * len(xs)) - 1)])


def _saturation_flag(latencies: np.ndarray) -> bool:
    """Tail growth check: P999 of the second half vs the first half."""
    n = len(latencies)
    if n < 200:
        return False
    half = n // 2
    p1 = _nearest_rank(latencies[:half], 0.999)
    p2 = _nearest_rank(latencies[half:], 0.999)
    return p2 > 2.0 * p1


def replay(
    requests: list[Request],
    runtime,
    mode: str = "closed",
    *,
    clients: int = 8,
    rate_scale: float = 1.0,
    capture_seqs: set[int] | None = None,
) -> ReplayResult:
    """Drive the threaded runtime with a materialized trace.

    Closed loop: ``clients`` threads each keep one request in flight.  Open
    loop: a dispatcher thread issues at trace timestamps (divided by
    ``rate_scale``) without waiting for completions.
    """
    lat = np.zeros(len(requests), dtype=np.int64)
    hits: dict[int, list[Hit]] = {}
    errors = 0
    err_lock = threading.Lock()

    t_start = time.monotonic()
    if mode == "closed":
        it = iter(requests)
        it_lock = threading.Lock()
        buffers: list[list[tuple[int, int]]] = [[] for _ in range(clients)]

        def client_main(ci: int) -> None:
            nonlocal errors
            while True:
                with it_lock:
                    req = next(it, None)
                if req is None:
                    return
                t0 = time.monotonic_ns() // 1000
                try:
                    if req.kind == "hnsw":
                        res = runtime.run_hnsw_query(req.table, req.query)
                    else:
                        res = runtime.run_ivf_query(req.table, req.query, req.nprobe)
                except Exception:
                    with err_lock:
                        errors += 1
                    continue
                t1 = time.monotonic_ns() // 1000
                buffers[ci].append((req.seq, t1 - t0))
                if capture_seqs is not None and req.seq in capture_seqs:
                    hits[req.seq] = res

        threads = [
            threading.Thread(target=client_main, args=(ci,), daemon=True)
            for ci in range(clients)
        ]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        for buf in buffers:
            for seq, dt in buf:
                lat[seq] = dt
    elif mode == "open":
        pending: list[tuple[Request, object]] = []
        base = time.monotonic()
        for req in requests:
            due = base + (req.ts_us / 1e6) / rate_scale
            delay = due - time.monotonic()
            if delay > 0:
                time.sleep(delay)
            try:
                if req.kind == "hnsw":
                    h = runtime.submit_hnsw_query(req.table, req.query)
                else:
                    h = runtime.submit_ivf_query(req.table, req.query, req.nprobe)
            except Exception:
                errors += 1
                continue
            pending.append((req, h))
        for req, h in pending:
            try:
                if req.kind == "hnsw":
                    res = h.wait().hits
                    done = h.completed_us
                    start = h.submit_us
                else:
                    res = h.wait()
                    done = h.completed_us()
                    start = min(x.submit_us for x in h.handles)
                lat[req.seq] = done - start
                if capture_seqs is not None and req.seq in capture_seqs:
                    hits[req.seq] = res
            except Exception:
                errors += 1
    else:
        raise ValueError(f"unknown replay mode {mode!r} (expected open|closed)")

    wall = time.monotonic() - t_start
    completions = len(requests) - errors
    return ReplayResult(
        latencies_us=lat,
        wall_s=wall,
        completions=completions,
        errors=errors,
        hits=hits,
        saturated=_saturation_flag(lat),
    )
