"""Core cloud inventory types, catalog/trace I/O, and synthetic arrival plans."""

from __future__ import annotations

import csv
import sys
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

POWER_TABLE_POINTS = 11  # wattage at 0%, 10%, ..., 100% cpu utilization
DEFAULT_MAX_HOSTS = 200
DEFAULT_DELTA_S = 300.0
DEFAULT_SLA_MULTIPLIER = 1.5

TRACE_COLUMNS = ("interval", "workload_id", "cpu_ips", "ram_gb", "disk_gb")


class WorkloadCompleted(Exception):
    """Raised when a workload's demand is queried past the end of its trace."""


@dataclass(frozen=True)
class DemandVector:
    """Per-interval resource demand: cpu (IPS), ram (GB), disk (GB)."""

    cpu: float
    ram: float
    disk: float

    def __post_init__(self):
        for name in ("cpu", "ram", "disk"):
            if getattr(self, name) < 0:
                raise ValueError(f"demand component {name} must be >= 0")

    def as_array(self) -> np.ndarray:
        return np.array([self.cpu, self.ram, self.disk])

    @staticmethod
    def zero() -> "DemandVector":
        return DemandVector(0.0, 0.0, 0.0)


@dataclass(frozen=True)
class ProvisionDelay:
    """Gaussian boot-time distribution for one VM type, in seconds."""

    mean_s: float
    std_s: float

    def __post_init__(self):
        if self.mean_s < 0:
            raise ValueError("provision_delay mean_s must be >= 0")
        if self.std_s < 0:
            raise ValueError("provision_delay std_s must be >= 0")


@dataclass(frozen=True)
class VmType:
    name: str
    cpu_capacity: float  # IPS
    ram_capacity: float  # GB
    disk_capacity: float  # GB
    cost_per_hour: float  # USD
    provision_delay: ProvisionDelay
    power_table: tuple[float, ...]  # watts at 0/10/.../100% cpu utilization

    def __post_init__(self):
        for name in ("cpu_capacity", "ram_capacity", "disk_capacity"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{self.name}: {name} must be > 0")
        if self.cost_per_hour < 0:
            raise ValueError(f"{self.name}: cost_per_hour must be >= 0")
        if len(self.power_table) != POWER_TABLE_POINTS:
            raise ValueError(
                f"{self.name}: power_table needs {POWER_TABLE_POINTS} entries")
        if any(b < a for a, b in zip(self.power_table, self.power_table[1:])):
            raise ValueError(f"{self.name}: power_table must be non-decreasing")

    def power_at(self, utilization: float) -> float:
        """Wattage at a cpu utilization fraction, linearly interpolated."""
        u = min(max(utilization, 0.0), 1.0)
        return float(np.interp(u, np.linspace(0.0, 1.0, POWER_TABLE_POINTS),
                               self.power_table))

    def capacity(self) -> DemandVector:
        return DemandVector(self.cpu_capacity, self.ram_capacity, self.disk_capacity)


@dataclass(frozen=True)
class Host:
    """An active VM instance; pending_until marks in-interval boot time left."""

    id: int
    vm_type: VmType
    active_since: int
    pending_until: float | None = None

    def booted(self) -> "Host":
        return replace(self, pending_until=None)


@dataclass
class Workload:
    """A demand trace plus SLA bookkeeping; only accrued_delay mutates."""

    id: int
    arrival_interval: int
    trace: tuple[DemandVector, ...]
    sla_deadline: float  # seconds
    accrued_delay: float = 0.0  # waiting + migration + boot penalties, seconds

    def __post_init__(self):
        self.trace = tuple(self.trace)
        if not self.trace:
            raise ValueError(f"workload {self.id}: trace must be non-empty")
        if self.sla_deadline <= 0:
            raise ValueError(f"workload {self.id}: sla_deadline must be > 0")

    @property
    def length(self) -> int:
        return len(self.trace)

    def end_interval(self) -> int:
        """Last interval with demand; the workload completes at its end."""
        return self.arrival_interval + self.length - 1


@dataclass(frozen=True)
class VmCatalog:
    vm_types: tuple[VmType, ...]
    max_hosts: int = DEFAULT_MAX_HOSTS

    def __post_init__(self):
        object.__setattr__(self, "vm_types", tuple(self.vm_types))
        if not self.vm_types:
            raise ValueError("catalog must be non-empty")
        names = [v.name for v in self.vm_types]
        if len(set(names)) != len(names):
            raise ValueError("catalog vm type names must be unique")
        if self.max_hosts <= 0:
            raise ValueError("max_hosts must be > 0")

    def by_name(self, name: str) -> VmType:
        for v in self.vm_types:
            if v.name == name:
                return v
        raise KeyError(f"unknown vm type {name!r}")

    def max_capacities(self) -> DemandVector:
        """Componentwise maxima across types; the feature-normalization scale."""
        return DemandVector(
            max(v.cpu_capacity for v in self.vm_types),
            max(v.ram_capacity for v in self.vm_types),
            max(v.disk_capacity for v in self.vm_types),
        )

    def max_cost(self) -> float:
        return max(v.cost_per_hour for v in self.vm_types)


# ---------------------------------------------------------------------------
# catalog I/O


def default_power_table(max_watts: float) -> tuple[float, ...]:
    """Linear from 60% of max at idle to 100% at full cpu."""
    return tuple(max_watts * (0.6 + 0.4 * i / (POWER_TABLE_POINTS - 1))
                 for i in range(POWER_TABLE_POINTS))


def default_catalog(max_hosts: int = DEFAULT_MAX_HOSTS) -> VmCatalog:
    """Three burstable types; B2s is the 2-core/4GB 0.09 USD/h reference."""
    return VmCatalog(
        vm_types=(
            VmType("B2s", 4000.0, 4.0, 8.0, 0.09,
                   ProvisionDelay(60.0, 10.0), default_power_table(120.0)),
            VmType("B4ms", 8000.0, 16.0, 32.0, 0.166,
                   ProvisionDelay(90.0, 15.0), default_power_table(180.0)),
            VmType("B8ms", 16000.0, 32.0, 64.0, 0.333,
                   ProvisionDelay(120.0, 20.0), default_power_table(300.0)),
        ),
        max_hosts=max_hosts,
    )


def _fmt(x: float) -> str:
    return repr(float(x))


def save_catalog(catalog: VmCatalog, path: str) -> None:
    """Canonical TOML-style writer; load(save(x)) round-trips byte-stably."""
    lines = [f"max_hosts = {catalog.max_hosts}", ""]
    for v in catalog.vm_types:
        lines.append("[[vm_type]]")
        lines.append(f'name = "{v.name}"')
        lines.append(f"cpu_ips = {_fmt(v.cpu_capacity)}")
        lines.append(f"ram_gb = {_fmt(v.ram_capacity)}")
        lines.append(f"disk_gb = {_fmt(v.disk_capacity)}")
        lines.append(f"cost_per_hour_usd = {_fmt(v.cost_per_hour)}")
        lines.append(f"provision_mean_s = {_fmt(v.provision_delay.mean_s)}")
        lines.append(f"provision_std_s = {_fmt(v.provision_delay.std_s)}")
        watts = ", ".join(_fmt(w) for w in v.power_table)
        lines.append(f"power_watts = [{watts}]")
        lines.append("")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines))


def load_catalog(path: str) -> VmCatalog:
    with open(path, "rb") as fh:
        try:
            doc = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ValueError(f"catalog parse failure in {path}: {exc}") from exc
    tables = doc.get("vm_type", [])
    if not tables:
        raise ValueError("catalog must be non-empty")
    types = []
    for tab in tables:
        missing = [k for k in ("name", "cpu_ips", "ram_gb", "disk_gb",
                               "cost_per_hour_usd", "provision_mean_s",
                               "provision_std_s", "power_watts") if k not in tab]
        if missing:
            raise ValueError(f"catalog vm_type missing field {missing[0]!r}")
        types.append(VmType(
            name=str(tab["name"]),
            cpu_capacity=float(tab["cpu_ips"]),
            ram_capacity=float(tab["ram_gb"]),
            disk_capacity=float(tab["disk_gb"]),
            cost_per_hour=float(tab["cost_per_hour_usd"]),
            provision_delay=ProvisionDelay(float(tab["provision_mean_s"]),
                                           float(tab["provision_std_s"])),
            power_table=tuple(float(w) for w in tab["power_watts"]),
        ))
    return VmCatalog(tuple(types), max_hosts=int(doc.get("max_hosts", DEFAULT_MAX_HOSTS)))


# ---------------------------------------------------------------------------
# trace I/O


def load_traces(path: str, delta_s: float = DEFAULT_DELTA_S,
                sla_multiplier: float = DEFAULT_SLA_MULTIPLIER) -> list[Workload]:
    """One Workload template per id; rows must be interval-contiguous per id."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = tuple(reader.fieldnames or ())
        for col in TRACE_COLUMNS:
            if col not in header:
                raise ValueError(f"trace file missing column {col!r}")
        rows: dict[int, list[tuple[int, DemandVector]]] = {}
        for lineno, rec in enumerate(reader, start=2):
            wid = int(rec["workload_id"])
            interval = int(rec["interval"])
            vals = {}
            for col in ("cpu_ips", "ram_gb", "disk_gb"):
                v = float(rec[col])
                if v < 0:
                    raise ValueError(f"row {lineno}: {col} must be >= 0")
                vals[col] = v
            rows.setdefault(wid, []).append(
                (interval, DemandVector(vals["cpu_ips"], vals["ram_gb"], vals["disk_gb"])))
    templates = []
    for wid in sorted(rows):
        entries = sorted(rows[wid], key=lambda e: e[0])
        intervals = [e[0] for e in entries]
        expected = list(range(intervals[0], intervals[0] + len(intervals)))
        if intervals != expected:
            raise ValueError(
                f"workload {wid}: intervals must be contiguous, got {intervals}")
        trace = tuple(e[1] for e in entries)
        templates.append(Workload(
            id=wid,
            arrival_interval=intervals[0],
            trace=trace,
            sla_deadline=sla_multiplier * len(trace) * delta_s,
        ))
    return templates


def save_traces(workloads: Sequence[Workload], path: str) -> None:
    """Canonical CSV writer matching load_traces; byte-stable round trip."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TRACE_COLUMNS)
        for w in sorted(workloads, key=lambda w: w.id):
            for off, d in enumerate(w.trace):
                writer.writerow([w.arrival_interval + off, w.id,
                                 _fmt(d.cpu), _fmt(d.ram), _fmt(d.disk)])


# ---------------------------------------------------------------------------
# features


def workload_feature(w: Workload, t: int) -> DemandVector:
    """Demand of w during interval t; zero before arrival (new workloads)."""
    offset = t - w.arrival_interval
    if offset < 0:
        return DemandVector.zero()
    if offset >= w.length:
        raise WorkloadCompleted(
            f"workload {w.id} completed at interval {w.end_interval()}")
    return w.trace[offset]


def host_feature(host: Host, allocated: Sequence[int],
                 demands: dict[int, DemandVector]) -> np.ndarray:
    """[Σ cpu, Σ ram, Σ disk, c̄, r̄, s̄]; empty allocation yields zero sums."""
    total = np.zeros(3)
    for wid in allocated:
        total += demands[wid].as_array()
    cap = host.vm_type
    return np.concatenate([total, [cap.cpu_capacity, cap.ram_capacity,
                                   cap.disk_capacity]])


# ---------------------------------------------------------------------------
# synthetic workloads and arrival plans


def instantiate(template: Workload, new_id: int, arrival: int,
                delta_s: float = DEFAULT_DELTA_S,
                sla_multiplier: float = DEFAULT_SLA_MULTIPLIER) -> Workload:
    """Fresh workload replaying the template's trace from its first interval."""
    return Workload(
        id=new_id,
        arrival_interval=arrival,
        trace=template.trace,
        sla_deadline=sla_multiplier * len(template.trace) * delta_s,
    )


def fit_arrival_rate(templates: Sequence[Workload]) -> float:
    """Poisson MLE of arrivals per interval over the templates' arrival span."""
    if not templates:
        return 0.0
    arrivals = [w.arrival_interval for w in templates]
    span = max(arrivals) - min(arrivals) + 1
    return len(templates) / span


def synthesize_arrivals(templates: Sequence[Workload], horizon: int, seed: int,
                        delta_s: float = DEFAULT_DELTA_S,
                        sla_multiplier: float = DEFAULT_SLA_MULTIPLIER,
                        rate: float | None = None) -> list[tuple[int, Workload]]:
    """Arrival plan over `horizon` intervals; deterministic in (templates, seed).

    Per-interval arrival counts are Poisson with the rate fitted from the
    templates (overridable); each arrival replays a uniformly chosen template.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    if not templates:
        raise ValueError("templates must be non-empty")
    lam = fit_arrival_rate(templates) if rate is None else rate
    rng = np.random.default_rng(seed)
    plan: list[tuple[int, Workload]] = []
    next_id = 0
    for t in range(horizon):
        for _ in range(int(rng.poisson(lam))):
            tmpl = templates[int(rng.integers(len(templates)))]
            plan.append((t, instantiate(tmpl, next_id, t, delta_s, sla_multiplier)))
            next_id += 1
    return plan


def sinusoidal_templates(count: int, seed: int,
                         min_length: int = 8, max_length: int = 24,
                         cpu_base: float = 1500.0, cpu_amplitude: float = 900.0,
                         ram_base: float = 1.2, ram_amplitude: float = 0.8,
                         disk_base: float = 2.0, disk_amplitude: float = 1.0,
                         period: float = 12.0, noise: float = 0.05,
                         arrivals_per_interval: float = 1.0,
                         delta_s: float = DEFAULT_DELTA_S,
                         sla_multiplier: float = DEFAULT_SLA_MULTIPLIER) -> list[Workload]:
    """Sinusoid-plus-noise demand templates standing in for real trace datasets."""
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(seed)
    templates = []
    for i in range(count):
        length = int(rng.integers(min_length, max_length + 1))
        phase = rng.uniform(0.0, 2.0 * np.pi)
        offsets = np.arange(length)
        wave = np.sin(2.0 * np.pi * offsets / period + phase)
        jitter = 1.0 + noise * rng.standard_normal(length)
        cpu = np.clip((cpu_base + cpu_amplitude * wave) * jitter, 0.0, None)
        ram = np.clip((ram_base + ram_amplitude * wave) * jitter, 0.0, None)
        disk = np.clip((disk_base + disk_amplitude * wave) * jitter, 0.0, None)
        trace = tuple(DemandVector(float(c), float(r), float(s))
                      for c, r, s in zip(cpu, ram, disk))
        arrival = int(i / arrivals_per_interval)
        templates.append(Workload(
            id=i, arrival_interval=arrival, trace=trace,
            sla_deadline=sla_multiplier * length * delta_s))
    return templates
