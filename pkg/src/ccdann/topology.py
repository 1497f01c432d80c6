"""Chiplet (CCD) topology of the processor: core groups and steal neighbor sets.

On chiplet CPUs the last-level cache is private to each core complex die
(CCD), so the scheduler has to know which cores share one.  A ``Topology``
can be detected from sysfs, loaded from a JSON config, or synthesized for
simulation; every downstream component consumes the same immutable object,
which is what lets the whole runtime execute on machines that have no CCDs
at all.
"""

from __future__ import annotations

import json
import logging
import os
import re
from dataclasses import dataclass, field

log = logging.getLogger(__name__)

_SIM_RE = re.compile(r"^sim:(\d+)x(\d+)$")


class TopologyError(ValueError):
    """Malformed or inconsistent topology description."""


@dataclass(frozen=True)
class Topology:
    """Immutable core/CCD layout. Safe to share across threads."""

    cores_per_ccd: tuple[tuple[int, ...], ...]
    core_to_ccd: dict[int, int] = field(init=False, compare=False, repr=False)

    def __post_init__(self) -> None:
        if not self.cores_per_ccd:
            raise TopologyError("topology needs at least one CCD")
        mapping: dict[int, int] = {}
        for ccd, cores in enumerate(self.cores_per_ccd):
            if not cores:
                raise TopologyError(f"ccds[{ccd}].cores: CCD has no cores")
            for core in cores:
                if not isinstance(core, int) or core < 0:
                    raise TopologyError(f"ccds[{ccd}].cores: bad core id {core!r}")
                if core in mapping:
                    raise TopologyError(
                        f"ccds[{ccd}].cores: core {core} already in CCD {mapping[core]}"
                    )
                mapping[core] = ccd
        object.__setattr__(self, "core_to_ccd", mapping)

    @property
    def ccd_count(self) -> int:
        return len(self.cores_per_ccd)

    @property
    def total_cores(self) -> int:
        return len(self.core_to_ccd)

    def all_cores(self) -> tuple[int, ...]:
        return tuple(sorted(self.core_to_ccd))

    def to_config(self) -> dict:
        return {
            "ccds": [
                {"id": i, "cores": list(cores)}
                for i, cores in enumerate(self.cores_per_ccd)
            ]
        }

    @classmethod
    def from_config(cls, cfg: dict) -> "Topology":
        ccds = cfg.get("ccds")
        if not isinstance(ccds, list) or not ccds:
            raise TopologyError("ccds: expected a non-empty list")
        by_id: dict[int, list[int]] = {}
        for n, entry in enumerate(ccds):
            if not isinstance(entry, dict):
                raise TopologyError(f"ccds[{n}]: expected an object")
            cid = entry.get("id", n)
            if not isinstance(cid, int) or cid < 0:
                raise TopologyError(f"ccds[{n}].id: bad CCD id {cid!r}")
            if cid in by_id:
                raise TopologyError(f"ccds[{n}].id: duplicate CCD id {cid}")
            cores = entry.get("cores")
            if not isinstance(cores, list) or not cores:
                raise TopologyError(f"ccds[{n}].cores: expected a non-empty list")
            by_id[cid] = cores
        if sorted(by_id) != list(range(len(by_id))):
            raise TopologyError("ccds[*].id: ids must form 0..n-1")
        return cls(tuple(tuple(by_id[i]) for i in range(len(by_id))))

    @classmethod
    def synthetic(cls, ccd_count: int, cores_per_ccd: int) -> "Topology":
        if ccd_count < 1 or cores_per_ccd < 1:
            raise TopologyError("synthetic topology needs >= 1 CCD and >= 1 core per CCD")
        return cls(
            tuple(
                tuple(range(c * cores_per_ccd, (c + 1) * cores_per_ccd))
                for c in range(ccd_count)
            )
        )


@dataclass(frozen=True)
class NeighborSets:
    """Per-core steal vicinities: same-CCD cores and an ordered cross-CCD list."""

    intra: dict[int, frozenset[int]]
    cross: dict[int, tuple[int, ...]]


def neighbor_sets(topo: Topology) -> NeighborSets:
    """Derive the two disjoint steal neighbor sets for every core.

    ``intra[i]`` holds the other cores of i's CCD.  ``cross[i]`` holds all
    remaining cores, grouped by CCD walking upward (mod ccd_count) from i's
    CCD, cores ascending inside a group — a fixed probe order so scheduling
    runs are reproducible.
    """
    intra: dict[int, frozenset[int]] = {}
    cross: dict[int, tuple[int, ...]] = {}
    m = topo.ccd_count
    for ccd, cores in enumerate(topo.cores_per_ccd):
        for core in cores:
            intra[core] = frozenset(c for c in cores if c != core)
            order: list[int] = []
            for step in range(1, m):
                order.extend(sorted(topo.cores_per_ccd[(ccd + step) % m]))
            cross[core] = tuple(order)
    return NeighborSets(intra=intra, cross=cross)


def _parse_cpu_list(text: str) -> list[int]:
    """Parse a sysfs cpulist like ``0-3,8,10-11``."""
    cpus: list[int] = []
    for part in text.strip().split(","):
        if not part:
            continue
        if "-" in part:
            lo, hi = part.split("-", 1)
            cpus.extend(range(int(lo), int(hi) + 1))
        else:
            cpus.append(int(part))
    return cpus


def _available_cores() -> list[int]:
    try:
        return sorted(os.sched_getaffinity(0))
    except AttributeError:  # non-Linux
        return list(range(os.cpu_count() or 1))


def detect_topology() -> Topology:
    """Best-effort detection of CCD boundaries from sysfs L3 sharing.

    Cores that share an L3 cache instance form one CCD.  When the platform
    exposes no L3 topology (VMs, containers, non-Linux) this degrades to a
    single synthetic CCD spanning every available core, with a warning.
    """
    cores = _available_cores()
    groups: dict[str, list[int]] = {}
    for core in cores:
        path = f"/sys/devices/system/cpu/cpu{core}/cache/index3/shared_cpu_list"
        try:
            with open(path) as fh:
                key = fh.read().strip()
        except OSError:
            groups = {}
            break
        groups.setdefault(key, []).append(core)
    if not groups:
        log.warning(
            "no L3 topology exposed by this platform; "
            "falling back to a single synthetic CCD over %d cores",
            len(cores),
        )
        return Topology((tuple(cores),))
    ordered = sorted(groups.values(), key=lambda g: g[0])
    return Topology(tuple(tuple(g) for g in ordered))


def physical_core_count() -> int:
    """Count distinct physical cores (SMT siblings collapsed); 0 if unknown."""
    seen: set[tuple[int, int]] = set()
    try:
        with open("/proc/cpuinfo") as fh:
            phys = core = None
            for line in fh:
                if ":" not in line:
                    phys = core = None
                    continue
                key, val = (s.strip() for s in line.split(":", 1))
                if key == "physical id":
                    phys = int(val)
                elif key == "core id":
                    core = int(val)
                if phys is not None and core is not None:
                    seen.add((phys, core))
                    phys = core = None
    except OSError:
        return 0
    return len(seen)


def load_topology(source: str) -> Topology:
    """Resolve a topology descriptor: ``auto`` | ``sim:<ccds>x<cores>`` | ``file:<path>``."""
    if source == "auto":
        return detect_topology()
    m = _SIM_RE.match(source)
    if m:
        return Topology.synthetic(int(m.group(1)), int(m.group(2)))
    if source.startswith("file:"):
        path = source[len("file:"):]
        try:
            with open(path) as fh:
                cfg = json.load(fh)
        except json.JSONDecodeError as e:
            raise TopologyError(f"{path}: not valid JSON ({e})") from e
        return Topology.from_config(cfg)
    raise TopologyError(
        f"unrecognized topology source {source!r} "
        "(expected auto | sim:<ccds>x<cores> | file:<path>)"
    )
