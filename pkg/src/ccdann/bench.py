"""End-to-end harness: build indexes, run a trace under a chosen scheduling
mode, and emit throughput/latency/steal/cache metrics as CSV.

Wall-clock benchmarking (threaded engine) and cache simulation
(deterministic engine) are separate run modes so neither measurement
disturbs the other.  Request outcomes are placement-independent: for a
fixed seed and trace, the hit lists are identical across v0/v1/v2.
"""

from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .cachesim import DEFAULT_BLOCK_BYTES, DEFAULT_CCD_L3_BYTES, LlcModel
from .dispatch import WindowConfig
from .hnsw import hnsw_build
from .ivf import default_nlist, ivf_build
from .runtime import Runtime
from .simulate import DEFAULT_BYTES_PER_TICK, SimRuntime
from .topology import load_topology
from .vectors import VectorSet, brute_force_topk, gen_gaussian_mixture, recall_at_k
from .workers import DEFAULT_QUEUE_CAPACITY, SchedMode
from .workload import (
    Request,
    TableSpec,
    materialize_requests,
    read_trace_spec,
    replay,
)

CSV_COLUMNS = [
    "mode",
    "topology",
    "qps",
    "p50_us",
    "p999_us",
    "steals_intra",
    "steals_cross",
    "cross_ratio",
    "llc_accesses",
    "llc_misses",
    "llc_rate",
    "recall_sample",
    "epochs_published",
]


def percentile(values, p: float):
    """Nearest-rank percentile: the value at rank ceil(p*n) of the sorted multiset."""
    if not 0.0 < p <= 1.0:
        raise ValueError(f"p must be in (0, 1], got {p}")
    xs = sorted(values)
    if not xs:
        raise ValueError("percentile of an empty multiset")
    return xs[math.ceil(p * len(xs)) - 1]


@dataclass
class RunConfig:
    trace: str
    topology: str = "auto"
    mode: str = "v2"
    tables: list[TableSpec] | None = None  # default: from the trace header
    window_s: float = 10.0
    min_events: int = 1
    cache_sim: bool = False
    block_bytes: int = DEFAULT_BLOCK_BYTES
    ccd_l3_bytes: int = DEFAULT_CCD_L3_BYTES
    out: str | None = None
    seed: int = 0
    loop: str = "closed"
    clients: int = 8
    queue_capacity: int = DEFAULT_QUEUE_CAPACITY
    bytes_per_tick: int = DEFAULT_BYTES_PER_TICK
    pin: bool = False
    cross_gate: bool = False
    dump_maps: str | None = None

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        with open(path) as fh:
            raw = json.load(fh)
        tables = raw.pop("tables", None)
        cfg = cls(**raw)
        if tables is not None:
            cfg.tables = [TableSpec(**t) for t in tables]
        return cfg

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.tables is not None:
            d["tables"] = [asdict(t) for t in self.tables]
        return d


@dataclass
class RunReport:
    mode: str
    topology: str
    qps: float
    p50_us: float
    p999_us: float
    steals_intra: int
    steals_cross: int
    cross_ratio: float
    llc_accesses: int
    llc_misses: int
    llc_rate: float
    recall_sample: float
    epochs_published: int
    # run identity and bookkeeping; not part of the CSV schema
    trace: str = ""
    seed: int = 0
    completions: int = 0
    errors: int = 0
    wall_s: float = 0.0

    def csv_row(self) -> list[str]:
        return [
            self.mode,
            self.topology,
            f"{self.qps:.3f}",
            f"{self.p50_us:.1f}",
            f"{self.p999_us:.1f}",
            str(self.steals_intra),
            str(self.steals_cross),
            f"{self.cross_ratio:.4f}",
            str(self.llc_accesses),
            str(self.llc_misses),
            f"{self.llc_rate:.6f}",
            f"{self.recall_sample:.4f}",
            str(self.epochs_published),
        ]


def _atomic_write(path: str | Path, text: str) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_report_csv(path: str | Path, reports: list[RunReport], note: str | None = None) -> None:
    lines = [",".join(CSV_COLUMNS)]
    lines.extend(",".join(r.csv_row()) for r in reports)
    if note:
        lines.append(f"# {note}")
    _atomic_write(path, "\n".join(lines) + "\n")
    meta = [{"trace": r.trace, "seed": r.seed, "mode": r.mode, "topology": r.topology,
             "completions": r.completions, "errors": r.errors, "wall_s": r.wall_s}
            for r in reports]
    _atomic_write(Path(f"{path}.meta.json"), json.dumps(meta, indent=1) + "\n")


@dataclass
class BuiltTables:
    datasets: dict[int, VectorSet]
    specs: list[TableSpec]


def build_tables(specs: list[TableSpec], seed: int) -> BuiltTables:
    """Deterministic per-table datasets; index builds happen at registration."""
    datasets = {
        t.table: gen_gaussian_mixture(
            t.rows, t.dim, n_clusters=max(4, min(32, t.rows // 64)),
            seed=int(np.random.SeedSequence([seed, 0xDA7A, t.table]).generate_state(1)[0]),
        )
        for t in specs
    }
    return BuiltTables(datasets=datasets, specs=specs)


def register_tables(host, built: BuiltTables, seed: int) -> None:
    for t in built.specs:
        vs = built.datasets[t.table]
        idx_seed = int(np.random.SeedSequence([seed, 0x1DE7, t.table]).generate_state(1)[0])
        if t.kind == "hnsw":
            idx = hnsw_build(vs, m=t.m, ef_construction=t.ef_construction, seed=idx_seed)
            host.register_hnsw_table(t.table, idx, ef_search=t.ef_search)
        else:
            nlist = t.nlist or default_nlist(t.rows)
            idx = ivf_build(vs, nlist=nlist, seed=idx_seed)
            nprobe = t.nprobe or max(1, round(0.1 * nlist))
            host.register_ivf_table(t.table, idx, nprobe=nprobe)


def _recall_sample(
    requests: list[Request],
    hits: dict[int, list],
    datasets: dict[int, VectorSet],
) -> float:
    vals = []
    for req in requests:
        got = hits.get(req.seq)
        if got is None:
            continue
        exact = brute_force_topk(datasets[req.table], req.query.vector, req.query.k)
        vals.append(recall_at_k(got, exact))
    return float(np.mean(vals)) if vals else 0.0


def _sample_seqs(n: int, limit: int = 100) -> set[int]:
    if n <= limit:
        return set(range(n))
    stride = n // limit
    return set(range(0, n, stride))


def run_benchmark(cfg: RunConfig, capture: dict | None = None) -> RunReport:
    """Execute one configured run end to end and (optionally) write its CSV."""
    topo = load_topology(cfg.topology)
    mode = SchedMode.parse(cfg.mode)
    spec = read_trace_spec(cfg.trace)
    table_specs = cfg.tables if cfg.tables is not None else spec.tables
    built = build_tables(table_specs, cfg.seed)
    requests = materialize_requests(cfg.trace, built.datasets, spec)
    window = WindowConfig(window_us=int(cfg.window_s * 1e6), min_events=cfg.min_events)
    sample = _sample_seqs(len(requests))
    map_rows: list[tuple] = []

    def on_publish(new_map, traffic) -> None:
        for mid in sorted(new_map.assign):
            map_rows.append((new_map.epoch, str(mid), new_map.assign[mid], traffic.get(mid, 0)))

    publish_hook = on_publish if cfg.dump_maps else None

    try:
        if cfg.cache_sim:
            cache = LlcModel(
                topo.ccd_count,
                max(1, cfg.ccd_l3_bytes // cfg.block_bytes),
                cfg.block_bytes,
            )
            sim = SimRuntime(
                topo,
                mode,
                window=window,
                cache=cache,
                bytes_per_tick=cfg.bytes_per_tick,
                queue_capacity=cfg.queue_capacity,
                seed=cfg.seed,
                cross_gate=cfg.cross_gate,
                on_publish=publish_hook,
            )
            register_tables(sim, built, cfg.seed)
            kwargs = (
                {"closed_loop_clients": cfg.clients}
                if cfg.loop == "closed"
                else {}
            )
            rep = sim.run(requests, capture_hits=True, **kwargs)
            lat = rep.latencies_ticks
            hits = rep.hits or {}
            qps = rep.completions / (rep.makespan_ticks / 1e6) if rep.makespan_ticks else 0.0
            steals = rep.steals
            cache_report = rep.cache
            epochs = rep.epochs_published
            completions, errors, wall = rep.completions, 0, 0.0
        else:
            rt = Runtime(
                topo,
                mode,
                window=window,
                auto_window=True,
                queue_capacity=cfg.queue_capacity,
                seed=cfg.seed,
                pin=cfg.pin,
                cross_gate=cfg.cross_gate,
                on_publish=publish_hook,
            )
            register_tables(rt, built, cfg.seed)
            with rt:
                res = replay(
                    requests, rt, cfg.loop, clients=cfg.clients, capture_seqs=sample
                )
            lat = res.latencies_us
            hits = res.hits
            qps = res.qps
            steals = rt.steal_summary()
            cache_report = None
            epochs = rt.monitor.epochs_published
            completions, errors, wall = res.completions, res.errors, res.wall_s
    except Exception as e:
        if cfg.out:
            write_report_csv(cfg.out, [], note=f"incomplete: {e}")
        raise

    sampled_hits = {s: hits[s] for s in sample if s in hits}
    recall = _recall_sample(requests, sampled_hits, built.datasets)
    lat_list = lat[lat > 0].tolist() or [0]
    report = RunReport(
        mode=mode.value,
        topology=cfg.topology,
        qps=qps,
        p50_us=float(percentile(lat_list, 0.5)),
        p999_us=float(percentile(lat_list, 0.999)),
        steals_intra=steals.steals_intra,
        steals_cross=steals.steals_cross,
        cross_ratio=steals.cross_ratio,
        llc_accesses=cache_report.accesses if cache_report else 0,
        llc_misses=cache_report.misses if cache_report else 0,
        llc_rate=cache_report.rate if cache_report else 0.0,
        recall_sample=recall,
        epochs_published=epochs,
        trace=str(cfg.trace),
        seed=cfg.seed,
        completions=completions,
        errors=errors,
        wall_s=wall,
    )
    if capture is not None:
        capture["hits"] = hits
        capture["requests"] = requests
        capture["report"] = report
    if cfg.out:
        write_report_csv(cfg.out, [report])
    if cfg.dump_maps:
        lines = ["epoch,mapping_id,ccd,est_bytes"]
        lines.extend(f"{e},{m},{c},{b}" for e, m, c, b in map_rows)
        _atomic_write(cfg.dump_maps, "\n".join(lines) + "\n")
    return report


_NUMERIC_METRICS = [
    "qps",
    "p50_us",
    "p999_us",
    "steals_intra",
    "steals_cross",
    "cross_ratio",
    "llc_accesses",
    "llc_misses",
    "llc_rate",
    "recall_sample",
    "epochs_published",
]


def compare_runs(reports: list[RunReport]) -> str:
    """Side-by-side metric table with relative deltas against the first run."""
    if len(reports) < 2:
        raise ValueError("need at least two reports to compare")
    base = reports[0]
    for r in reports[1:]:
        if (r.trace, r.seed) != (base.trace, base.seed):
            raise ValueError(
                f"reports cover different runs: {(r.trace, r.seed)} vs {(base.trace, base.seed)}"
            )
    labels = [f"{r.mode}@{r.topology}" for r in reports]
    header = ["metric"] + labels + [f"delta_{l}" for l in labels[1:]]
    lines = [",".join(header)]
    for metric in _NUMERIC_METRICS:
        vals = [getattr(r, metric) for r in reports]
        row = [metric] + [f"{v:.6g}" for v in vals]
        for v in vals[1:]:
            row.append(f"{(v - vals[0]) / vals[0]:+.4f}" if vals[0] else "")
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"
