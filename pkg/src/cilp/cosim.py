"""The co-simulated digital twin: advances one interval and scores QoS.

A SimState is owned by one logical driver; what_if clones the whole state
(rng included) so hypothetical decisions can be scored without touching it.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .domain import DemandVector, Host, VmCatalog, Workload
from .sched import ProvisioningDecision, Schedule, expand_hosts, validate_decision

METRICS_COLUMNS = ("t", "r", "cost_usd", "q_e", "q_r", "q_sla", "qos", "reward",
                   "active_hosts", "live_workloads", "migrations", "provisions",
                   "deallocations")


class SimulationError(RuntimeError):
    """An inconsistent decision/schedule reached the twin; hard stop."""


@dataclass(frozen=True)
class SimConfig:
    delta_s: float = 300.0
    gamma: float = 0.5
    alpha: float = 1.0 / 3.0
    beta: float = 1.0 / 3.0
    delta_weight: float = 1.0 / 3.0
    migration_rate_gb_per_s: float = 1.0

    def __post_init__(self):
        if self.delta_s <= 0:
            raise ValueError("delta_s must be > 0")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        weights = (self.alpha, self.beta, self.delta_weight)
        if any(w < 0 for w in weights) or abs(sum(weights) - 1.0) > 1e-9:
            raise ValueError("qos weights must be >= 0 and sum to 1")


@dataclass
class Completion:
    workload_id: int
    response_s: float
    deadline_s: float
    violated: bool


@dataclass
class Ledger:
    """Cumulative episode accounting; all values non-negative."""

    energy_wh: float = 0.0
    cost_usd: float = 0.0
    completions: list[Completion] = field(default_factory=list)
    sla_violations: int = 0
    migrations: int = 0
    provision_overhead_s: float = 0.0
    arrived: int = 0


@dataclass
class QoSReport:
    t: int
    r: float
    cost_usd: float
    energy_wh: float
    q_e: float
    q_r: float
    q_sla: float
    qos: float
    reward: float
    phi_norm: float
    active_hosts: int
    live_workloads: int
    migrations: int
    provisions: int
    deallocations: int
    completed: int
    mean_response_s: float
    provision_overhead_s: float

    def csv_row(self) -> list:
        return [self.t, self.r, self.cost_usd, self.q_e, self.q_r, self.q_sla,
                self.qos, self.reward, self.active_hosts, self.live_workloads,
                self.migrations, self.provisions, self.deallocations]


@dataclass
class SimState:
    config: SimConfig
    catalog: VmCatalog
    t: int = 0
    hosts: list[Host] = field(default_factory=list)
    workloads: dict[int, Workload] = field(default_factory=dict)
    placements: dict[int, int] = field(default_factory=dict)
    queue: list[int] = field(default_factory=list)
    rng: np.random.Generator = None  # set in new_state
    next_host_id: int = 0
    next_workload_id: int = 0
    ledger: Ledger = field(default_factory=Ledger)

    def live_ids(self) -> list[int]:
        return sorted(self.workloads)


def new_state(catalog: VmCatalog, seed: int, config: SimConfig | None = None) -> SimState:
    return SimState(config=config or SimConfig(), catalog=catalog,
                    rng=np.random.default_rng(seed))


def add_workload(state: SimState, w: Workload) -> None:
    """Admit an arrival: live immediately, queued until the scheduler places it."""
    if w.id in state.workloads:
        raise ValueError(f"workload id {w.id} already live")
    state.workloads[w.id] = w
    state.queue.append(w.id)
    state.ledger.arrived += 1
    state.next_workload_id = max(state.next_workload_id, w.id + 1)


def utilization_ratio(state: SimState, demands: dict[int, DemandVector]) -> float:
    """Placed cpu demand over total cpu capacity; 0 with no hosts."""
    return _utilization(state.hosts, state.placements, demands)


def _utilization(hosts, placements, demands) -> float:
    total_cap = sum(h.vm_type.cpu_capacity for h in hosts)
    if total_cap <= 0:
        return 0.0
    placed = sum(demands[wid].cpu for wid in placements)
    return placed / total_cap


def normalized_cost(state: SimState, catalog: VmCatalog) -> float:
    """Interval cost over the all-priciest-fleet cost; 0 with no hosts."""
    if not state.hosts:
        return 0.0
    total = sum(h.vm_type.cost_per_hour for h in state.hosts)
    return total / (len(state.hosts) * catalog.max_cost())


def qos_score(q_e: float, q_r: float, q_sla: float,
              alpha: float = 1.0 / 3.0, beta: float = 1.0 / 3.0,
              delta: float = 1.0 / 3.0) -> float:
    """1 minus the convex combination of the three normalized penalties."""
    if alpha < 0 or beta < 0 or delta < 0 or abs(alpha + beta + delta - 1.0) > 1e-9:
        raise ValueError("weights must be >= 0 and sum to 1")
    return 1.0 - (alpha * q_e + beta * q_r + delta * q_sla)


def reward(r: float, phi_norm: float, gamma: float) -> float:
    """Utilization minus gamma-weighted normalized cost."""
    return r - gamma * phi_norm


def step(state: SimState, demands: dict[int, DemandVector],
         decision: ProvisioningDecision, plan: Schedule) -> QoSReport:
    """Advance the twin one interval under (decision, plan); mutates state.

    Raises SimulationError when the plan references unknown hosts/workloads or
    violates the componentwise capacity constraint for `demands`.
    """
    cfg = state.config
    validate_decision(decision, state.hosts, state.catalog, len(state.workloads))

    # apply the decision: create pending hosts, migrate, then drop deallocated
    post_hosts, created = expand_hosts(state.hosts, decision, state.catalog,
                                       state.next_host_id, state.t)
    boots = {}
    for h in created:
        d = h.vm_type.provision_delay
        boot = float(np.clip(state.rng.normal(d.mean_s, d.std_s), 0.0, cfg.delta_s))
        boots[h.id] = boot
        state.ledger.provision_overhead_s += boot
    post_hosts = [h if h.id not in boots else
                  Host(h.id, h.vm_type, h.active_since, pending_until=boots[h.id])
                  for h in post_hosts]
    state.next_host_id += len(created)

    by_id = {h.id: h for h in post_hosts}
    _check_plan(plan, by_id, state.workloads, demands)

    for wid, src, dst in plan.migrations:
        if src not in decision.deallocations:
            raise SimulationError(f"migration of {wid} out of non-deallocated host {src}")
        state.workloads[wid].accrued_delay += (
            demands[wid].ram / cfg.migration_rate_gb_per_s)
    state.ledger.migrations += len(plan.migrations)

    state.hosts = post_hosts
    state.placements = dict(plan.placements)
    for wid, hid in state.placements.items():
        pending = by_id[hid].pending_until
        if pending:
            state.workloads[wid].accrued_delay += pending

    # interval metrics on the post-decision fleet
    cost = sum(h.vm_type.cost_per_hour for h in state.hosts) * (cfg.delta_s / 3600.0)
    energy_wh = 0.0
    per_host_cpu: dict[int, float] = {h.id: 0.0 for h in state.hosts}
    for wid, hid in state.placements.items():
        per_host_cpu[hid] += demands[wid].cpu
    for h in state.hosts:
        util = min(per_host_cpu[h.id] / h.vm_type.cpu_capacity, 1.0)
        energy_wh += h.vm_type.power_at(util) * cfg.delta_s / 3600.0
    # fixed reference: the max fleet of the hungriest type at full load, so
    # q_e penalizes fleet growth instead of rewarding idle padding
    peak_wh = (state.catalog.max_hosts
               * max(vt.power_at(1.0) for vt in state.catalog.vm_types)
               * cfg.delta_s / 3600.0)
    r = _utilization(state.hosts, state.placements, demands)

    # unplaced live workloads sit out the interval
    state.queue = ([wid for wid in state.queue if wid not in state.placements
                    and wid in state.workloads]
                   + sorted(wid for wid in state.workloads
                            if wid not in state.placements and wid not in state.queue))
    for wid in state.queue:
        state.workloads[wid].accrued_delay += cfg.delta_s

    # completions at interval end
    done = [w for w in state.workloads.values() if state.t >= w.end_interval()]
    responses = []
    violations = 0
    for w in sorted(done, key=lambda w: w.id):
        response = (state.t - w.arrival_interval) * cfg.delta_s + w.accrued_delay
        violated = response > w.sla_deadline
        violations += int(violated)
        responses.append((response, w.sla_deadline))
        state.ledger.completions.append(
            Completion(w.id, response, w.sla_deadline, violated))
        del state.workloads[w.id]
        state.placements.pop(w.id, None)
    state.queue = [wid for wid in state.queue if wid in state.workloads]
    state.ledger.sla_violations += violations

    q_e = energy_wh / peak_wh if peak_wh > 0 else 0.0
    if responses:
        mean_response = sum(r_ for r_, _ in responses) / len(responses)
        max_deadline = max(d for _, d in responses)
        q_r = min(max(mean_response / max_deadline, 0.0), 1.0)
        q_sla = violations / len(responses)
    else:
        mean_response = 0.0
        q_r = 0.0
        q_sla = 0.0

    qos = qos_score(q_e, q_r, q_sla, cfg.alpha, cfg.beta, cfg.delta_weight)
    phi_norm = normalized_cost(state, state.catalog)
    rew = reward(r, phi_norm, cfg.gamma)

    state.ledger.cost_usd += cost
    state.ledger.energy_wh += energy_wh

    report = QoSReport(
        t=state.t, r=r, cost_usd=cost, energy_wh=energy_wh, q_e=q_e, q_r=q_r,
        q_sla=q_sla, qos=qos, reward=rew, phi_norm=phi_norm,
        active_hosts=len(state.hosts),
        live_workloads=len(state.workloads), migrations=len(plan.migrations),
        provisions=len(decision.provisions),
        deallocations=len(decision.deallocations), completed=len(done),
        mean_response_s=mean_response,
        provision_overhead_s=sum(boots.values()))

    state.t += 1
    state.hosts = [h.booted() for h in state.hosts]
    return report


def what_if(state: SimState, demands: dict[int, DemandVector],
            decision: ProvisioningDecision, plan: Schedule) -> QoSReport:
    """Score (decision, plan) on a cloned state with a forked rng; state untouched."""
    clone = copy.deepcopy(state)
    return step(clone, demands, decision, plan)


def _check_plan(plan: Schedule, hosts_by_id: dict[int, Host],
                workloads: dict[int, Workload],
                demands: dict[int, DemandVector]) -> None:
    loads: dict[int, np.ndarray] = {hid: np.zeros(3) for hid in hosts_by_id}
    for wid, hid in plan.placements.items():
        if hid not in hosts_by_id:
            raise SimulationError(f"placement of {wid} on unknown host {hid}")
        if wid not in workloads:
            raise SimulationError(f"placement of unknown workload {wid}")
        if wid not in demands:
            raise SimulationError(f"no demand vector for placed workload {wid}")
        loads[hid] += demands[wid].as_array()
    for hid, load in loads.items():
        cap = hosts_by_id[hid].vm_type.capacity().as_array()
        if np.any(load > cap + 1e-6):
            raise SimulationError(f"capacity violated on host {hid}: {load} > {cap}")


def check_conservation(state: SimState) -> None:
    """Every arrived workload is exactly one of completed, placed, or queued."""
    assert state.ledger.arrived == len(state.ledger.completions) + len(state.workloads)
    placed = set(state.placements)
    queued = set(state.queue)
    assert placed.isdisjoint(queued)
    assert placed | queued == set(state.workloads)
    assert len(state.queue) == len(queued)
