"""Command-line front end: gen-data, gen-trace, build, run, compare."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .bench import RunConfig, RunReport, compare_runs, run_benchmark, write_report_csv
from .hnsw import hnsw_build
from .ivf import default_nlist, ivf_build
from .vectors import gen_gaussian_mixture, write_dataset
from .workload import TableSpec, TraceSpec, generate_trace


def _load_tables(path: str) -> list[TableSpec]:
    with open(path) as fh:
        return [TableSpec(**t) for t in json.load(fh)]


def _synthetic_tables(args) -> list[TableSpec]:
    return [
        TableSpec(table=i, kind=args.kind, rows=args.rows, dim=args.dim,
                  m=args.m, ef_construction=args.ef_construction,
                  ef_search=args.ef_search, nprobe=args.nprobe)
        for i in range(args.n_tables)
    ]


def _tables_from_args(args) -> list[TableSpec]:
    if args.tables:
        return _load_tables(args.tables)
    return _synthetic_tables(args)


def _add_table_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--tables", help="JSON file with table specs")
    p.add_argument("--n-tables", type=int, default=8, help="synthetic table count")
    p.add_argument("--kind", choices=["hnsw", "ivf"], default="hnsw")
    p.add_argument("--rows", type=int, default=2000)
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--m", type=int, default=32)
    p.add_argument("--ef-construction", type=int, default=500, dest="ef_construction")
    p.add_argument("--ef-search", type=int, default=64, dest="ef_search")
    p.add_argument("--nprobe", type=int, default=None)


def cmd_gen_data(args) -> int:
    vs = gen_gaussian_mixture(args.rows, args.dim, n_clusters=args.clusters, seed=args.seed)
    write_dataset(args.out, vs)
    print(f"wrote {vs.count}x{vs.dim} float32 vectors to {args.out}")
    return 0


def cmd_gen_trace(args) -> int:
    spec = TraceSpec(
        tables=_tables_from_args(args),
        skew_s=args.skew,
        rotation_period_us=int(args.rotate_s * 1e6),
        rotation_fraction=args.rotate_fraction,
        duration_us=int(args.duration_s * 1e6),
        qps=args.qps,
        k=args.k,
        seed=args.seed,
    )
    generate_trace(spec, args.out)
    print(f"wrote {spec.n_events()} events over {len(spec.tables)} tables to {args.out}")
    return 0


def cmd_build(args) -> int:
    import time

    from .bench import build_tables

    specs = _tables_from_args(args)
    built = build_tables(specs, args.seed)
    for t in specs:
        vs = built.datasets[t.table]
        t0 = time.monotonic()
        if t.kind == "hnsw":
            idx = hnsw_build(vs, m=t.m, ef_construction=t.ef_construction, seed=args.seed)
            extra = f"max_level={idx.max_level}"
        else:
            nlist = t.nlist or default_nlist(t.rows)
            idx = ivf_build(vs, nlist=nlist, seed=args.seed)
            extra = f"nlist={idx.nlist}"
        print(
            f"table {t.table} ({t.kind}): {vs.count}x{vs.dim} built in "
            f"{time.monotonic() - t0:.2f}s ({extra})"
        )
    return 0


def cmd_run(args) -> int:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig(trace=args.trace)
    for name in (
        "trace", "topology", "mode", "window_s", "min_events", "block_bytes",
        "ccd_l3_bytes", "out", "seed", "loop", "clients", "queue_capacity",
        "bytes_per_tick", "pin", "dump_maps",
    ):
        val = getattr(args, name, None)
        if val is not None:
            setattr(cfg, name, val)
    if args.cache_sim is not None:
        cfg.cache_sim = args.cache_sim == "on"

    if args.scale_ccds:
        reports: list[RunReport] = []
        for ccds in range(1, args.scale_ccds + 1):
            step = RunConfig(**{**cfg.to_dict(), "tables": None, "out": None})
            step.tables = cfg.tables
            step.topology = f"sim:{ccds}x{args.scale_cores}"
            rep = run_benchmark(step)
            reports.append(rep)
            print(",".join(rep.csv_row()))
        if cfg.out:
            write_report_csv(cfg.out, reports)
        return 0

    rep = run_benchmark(cfg)
    print(",".join(rep.csv_row()))
    if cfg.out:
        print(f"report written to {cfg.out}")
    return 0


def cmd_compare(args) -> int:
    reports = []
    for path in args.reports:
        with open(f"{path}.meta.json") as fh:
            meta = json.load(fh)
        with open(path) as fh:
            header = fh.readline().strip().split(",")
            for i, line in enumerate(fh):
                if line.startswith("#") or not line.strip():
                    continue
                row = dict(zip(header, line.strip().split(",")))
                reports.append(
                    RunReport(
                        mode=row["mode"],
                        topology=row["topology"],
                        qps=float(row["qps"]),
                        p50_us=float(row["p50_us"]),
                        p999_us=float(row["p999_us"]),
                        steals_intra=int(row["steals_intra"]),
                        steals_cross=int(row["steals_cross"]),
                        cross_ratio=float(row["cross_ratio"]),
                        llc_accesses=int(row["llc_accesses"]),
                        llc_misses=int(row["llc_misses"]),
                        llc_rate=float(row["llc_rate"]),
                        recall_sample=float(row["recall_sample"]),
                        epochs_published=int(row["epochs_published"]),
                        trace=meta[i]["trace"],
                        seed=meta[i]["seed"],
                    )
                )
    text = compare_runs(reports)
    if args.out:
        Path(args.out).write_text(text)
        print(f"comparison written to {args.out}")
    else:
        sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ccdann", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic dataset file")
    p.add_argument("--rows", type=int, required=True)
    p.add_argument("--dim", type=int, required=True)
    p.add_argument("--clusters", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("gen-trace", help="write a synthetic request trace")
    _add_table_args(p)
    p.add_argument("--skew", type=float, default=1.0, help="Zipf exponent")
    p.add_argument("--rotate-s", type=float, default=1.0, dest="rotate_s")
    p.add_argument("--rotate-fraction", type=float, default=0.2, dest="rotate_fraction")
    p.add_argument("--duration-s", type=float, default=1.0, dest="duration_s")
    p.add_argument("--qps", type=float, default=1000.0)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_trace)

    p = sub.add_parser("build", help="build indexes once and report stats")
    _add_table_args(p)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_build)

    p = sub.add_parser("run", help="replay a trace and emit the metrics CSV")
    p.add_argument("--config", help="JSON run config (flags override it)")
    p.add_argument("--trace")
    p.add_argument("--topology", help="auto | sim:<ccds>x<cores> | file:<path>")
    p.add_argument("--mode", choices=["v0", "v1", "v2"])
    p.add_argument("--window-s", type=float, dest="window_s")
    p.add_argument("--min-events", type=int, dest="min_events")
    p.add_argument("--cache-sim", choices=["on", "off"], dest="cache_sim")
    p.add_argument("--block-bytes", type=int, dest="block_bytes")
    p.add_argument("--ccd-l3-bytes", type=int, dest="ccd_l3_bytes")
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.add_argument("--loop", choices=["open", "closed"])
    p.add_argument("--clients", type=int)
    p.add_argument("--queue-capacity", type=int, dest="queue_capacity")
    p.add_argument("--bytes-per-tick", type=int, dest="bytes_per_tick")
    p.add_argument("--pin", action="store_const", const=True, default=None)
    p.add_argument("--dump-maps", dest="dump_maps")
    p.add_argument("--scale-ccds", type=int, dest="scale_ccds",
                   help="run sim topologies 1xN..KxN and emit one CSV")
    p.add_argument("--scale-cores", type=int, default=8, dest="scale_cores")
    p.set_defaults(fn=cmd_run, cache_sim=None)

    p = sub.add_parser("compare", help="side-by-side deltas for >=2 report CSVs")
    p.add_argument("reports", nargs="+")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_compare)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, KeyError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
