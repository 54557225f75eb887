"""Provisioners behind one interface: the two-phase imitation loop, a reactive
threshold comparator, a brute-force twin-guided oracle, and a no-op.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import cosim, sched
from .cosim import QoSReport, SimState
from .domain import DemandVector, host_feature
from .model import ActionFeature, CilpModel, FeatureScale, ScheduleGraph
from .sched import ProvisioningDecision, Schedule

DEFAULT_ETA = 1e-6
THREADS_ENV = "CILP_SIM_THREADS"


def sim_threads() -> int:
    """Cap on parallel what-if evaluations, from CILP_SIM_THREADS (default 1)."""
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def _map_ordered(fn, items):
    """Apply fn over items, optionally on a thread pool; order preserved."""
    n = sim_threads()
    if n <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


@dataclass
class DecideResult:
    decision: ProvisioningDecision
    plan: Schedule                                   # schedule under the decision view
    predicted: dict[int, DemandVector] | None = None  # demand estimates, if any
    qos_trace: list[float] | None = None              # accepted QoS estimates, in order


def legal_actions(state: SimState,
                  decision: ProvisioningDecision) -> list[tuple[str, int | str]]:
    """Single actions that keep `decision` legal once added.

    Deallocations are consumed by the incumbent decision; provisions can
    repeat. The fleet may never empty while workloads remain, nor exceed
    max_hosts.
    """
    post = len(state.hosts) + len(decision.provisions) - len(decision.deallocations)
    acts: list[tuple[str, int | str]] = []
    for h in sorted(state.hosts, key=lambda h: h.id):
        if h.id in decision.deallocations:
            continue
        if state.workloads and post - 1 < 1:
            continue
        acts.append(("deallocate", h.id))
    if post + 1 <= state.catalog.max_hosts:
        for vt in state.catalog.vm_types:
            acts.append(("provision", vt.name))
    return acts


def candidates(state: SimState, demands: dict[int, DemandVector],
               decision: ProvisioningDecision = ProvisioningDecision(),
               ) -> list[ActionFeature]:
    """Action features: one deallocate per active host, one provision per type.

    Deallocation features are the host's previous-interval characteristics
    under `demands`; provision features are a bare capacity vector. Actions
    that would break decision invariants are filtered out.
    """
    scale = FeatureScale.from_catalog(state.catalog)
    by_host: dict[int, list[int]] = {h.id: [] for h in state.hosts}
    for wid, hid in state.placements.items():
        if hid in by_host and wid in demands:
            by_host[hid].append(wid)
    feats = []
    for kind, ref in legal_actions(state, decision):
        if kind == "deallocate":
            host = next(h for h in state.hosts if h.id == ref)
            vec = host_feature(host, sorted(by_host[host.id]), demands)
            feats.append(ActionFeature.deallocate(host.id, vec, scale))
        else:
            feats.append(ActionFeature.provision(state.catalog.by_name(ref), scale))
    return feats


def _single(candidate: ActionFeature) -> ProvisioningDecision:
    if candidate.kind == "deallocate":
        return ProvisioningDecision(deallocations=frozenset({candidate.host_id}))
    return ProvisioningDecision(provisions=(candidate.vm_type,))


def _plan_for(state: SimState, demands: dict[int, DemandVector],
              decision: ProvisioningDecision) -> Schedule:
    return sched.schedule(state.hosts, demands, decision, state.placements,
                          state.catalog, state.next_host_id, state.t)


def _reward(report: QoSReport, gamma: float | None) -> float:
    if gamma is None:
        return report.reward
    return cosim.reward(report.r, report.phi_norm, gamma)


# ---------------------------------------------------------------------------
# the two-phase loop


def predict_demands(model: CilpModel, state: SimState,
                    w_prev: dict[int, DemandVector]) -> dict[int, DemandVector]:
    """Phase 1: next-interval demand estimates from the previous schedule."""
    scale = FeatureScale.from_catalog(state.catalog)
    graph = ScheduleGraph.build(state.hosts, state.placements, w_prev, scale)
    if graph.n_workloads == 0:
        return {}
    w_mat = np.stack([scale.demand(w_prev[w]) for w in graph.workload_ids])
    e0 = model.encode(model.encode_graph(graph), model.encode_window(w_mat),
                      graph.n_workloads)
    w_hat = model.predict_demands(e0, w_mat, graph.n_workloads)
    raw = np.maximum(scale.denorm_demands(w_hat.values), 0.0)  # clamp at inference
    return {wid: DemandVector(*raw[i]) for i, wid in enumerate(graph.workload_ids)}


def _score(model: CilpModel, state: SimState, plan: Schedule,
           decision: ProvisioningDecision, demands: dict[int, DemandVector],
           feats: Sequence[ActionFeature]) -> np.ndarray:
    scale = FeatureScale.from_catalog(state.catalog)
    hosts, _ = sched.expand_hosts(state.hosts, decision, state.catalog,
                                  state.next_host_id, state.t)
    graph = ScheduleGraph.build(hosts, plan.placements, demands, scale)
    w_mat = (np.stack([scale.demand(demands[w]) for w in graph.workload_ids])
             if graph.n_workloads else np.zeros((0, 3)))
    e0 = model.encode(model.encode_graph(graph), model.encode_window(w_mat),
                      graph.n_workloads)
    return model.likelihoods(e0, feats).values


def cilp_decide(model: CilpModel, state: SimState,
                w_prev: dict[int, DemandVector], gamma: float | None = None,
                eta: float = DEFAULT_ETA) -> DecideResult:
    """Predict demands, then greedily accrete actions while the twin's QoS
    estimate keeps improving by at least eta.

    Candidate features stay fixed at their previous-interval values; scores are
    recomputed against the tentative schedule after every acceptance. Each
    deallocation is offered at most once; provisions re-list. The loop runs at
    most |hosts| + |vm types| iterations.
    """
    w_hat = predict_demands(model, state, w_prev)
    base_feats = candidates(state, w_prev)
    by_key = {(f.kind, f.host_id if f.kind == "deallocate" else f.vm_type): f
              for f in base_feats}

    decision = ProvisioningDecision()
    plan = _plan_for(state, w_hat, decision)
    incumbent = cosim.what_if(state, w_hat, decision, plan).qos
    trace = [incumbent]
    max_iters = len(state.hosts) + len(state.catalog.vm_types)

    for _ in range(max_iters):
        post = (len(state.hosts) + len(decision.provisions)
                - len(decision.deallocations))
        avail = [by_key[(kind, ref)] for kind, ref in legal_actions(state, decision)
                 if (kind, ref) in by_key
                 # availability floor: an empty fleet is absorbing under the
                 # QoS-greedy rule (energy rises before any service gain), so
                 # never offer the last host for deallocation
                 and not (kind == "deallocate" and post - 1 < 1)]
        if not avail:
            break
        scores = _score(model, state, plan, decision, w_hat, avail)
        best = avail[int(np.argmax(scores))]
        trial = decision.merged_with(_single(best))
        trial_plan = _plan_for(state, w_hat, trial)
        qos = cosim.what_if(state, w_hat, trial, trial_plan).qos
        if qos < incumbent + eta:
            break
        decision, plan, incumbent = trial, trial_plan, qos
        trace.append(qos)
    return DecideResult(decision, plan, predicted=w_hat, qos_trace=trace)


# ---------------------------------------------------------------------------
# comparators


def reactive_threshold_decide(state: SimState, w_prev: dict[int, DemandVector],
                              hi: float = 0.8, lo: float = 0.3) -> ProvisioningDecision:
    """Threshold autoscaler: grow past hi utilization, shrink below lo.

    Cold start: with live workloads but no capacity at all, r is pinned to 0
    and the high threshold can never fire, so provision the cheapest type.
    """
    if not state.hosts:
        if state.workloads and state.catalog.max_hosts >= 1:
            cheapest = min(state.catalog.vm_types, key=lambda vt: vt.cost_per_hour)
            return ProvisioningDecision(provisions=(cheapest.name,))
        return ProvisioningDecision()
    r_prev = cosim.utilization_ratio(state, w_prev)
    if r_prev > hi:
        if len(state.hosts) + 1 > state.catalog.max_hosts:
            return ProvisioningDecision()
        capacity = sum(h.vm_type.cpu_capacity for h in state.hosts)
        demand = sum(d.cpu for d in w_prev.values())
        deficit = demand - hi * capacity
        fitting = [vt for vt in state.catalog.vm_types if vt.cpu_capacity >= deficit]
        if fitting:
            pick = min(fitting, key=lambda vt: vt.cost_per_hour)
        else:
            pick = max(state.catalog.vm_types, key=lambda vt: vt.cpu_capacity)
        return ProvisioningDecision(provisions=(pick.name,))
    if r_prev < lo and state.hosts:
        if state.workloads and len(state.hosts) - 1 < 1:
            return ProvisioningDecision()
        loads = {h.id: 0.0 for h in state.hosts}
        for wid, hid in state.placements.items():
            if wid in w_prev and hid in loads:
                loads[hid] += w_prev[wid].cpu
        emptiest = min(sorted(loads), key=lambda hid: (loads[hid], hid))
        return ProvisioningDecision(deallocations=frozenset({emptiest}))
    return ProvisioningDecision()


def oracle_decide(state: SimState, demands_true: dict[int, DemandVector],
                  gamma: float | None = None,
                  depth: int | None = None) -> DecideResult:
    """Greedy brute force with the true next-interval demands.

    At each step every legal single extension is scored via what_if; the best
    is kept only if it strictly improves the reward. Serves as label teacher
    and as an upper-bound comparator.
    """
    if depth is None:
        depth = len(state.hosts) + len(state.catalog.vm_types)
    decision = ProvisioningDecision()
    plan = _plan_for(state, demands_true, decision)
    best = _reward(cosim.what_if(state, demands_true, decision, plan), gamma)

    for _ in range(depth):
        options = [decision.merged_with(_single_action(kind, ref))
                   for kind, ref in legal_actions(state, decision)]
        if not options:
            break
        plans = [_plan_for(state, demands_true, d) for d in options]
        rewards = _map_ordered(
            lambda dp: _reward(cosim.what_if(state, demands_true, dp[0], dp[1]),
                               gamma),
            list(zip(options, plans)))
        idx = int(np.argmax(rewards))
        if rewards[idx] <= best:
            break
        decision, plan, best = options[idx], plans[idx], rewards[idx]
    return DecideResult(decision, plan)


def _single_action(kind: str, ref) -> ProvisioningDecision:
    if kind == "deallocate":
        return ProvisioningDecision(deallocations=frozenset({ref}))
    return ProvisioningDecision(provisions=(ref,))


# ---------------------------------------------------------------------------
# the common interface used by the episode runner


class Provisioner:
    name = "none"

    def decide(self, state: SimState,
               demands: dict[int, DemandVector]) -> DecideResult:
        decision = ProvisioningDecision()
        return DecideResult(decision, _plan_for(state, demands, decision))


class ReactiveProvisioner(Provisioner):
    name = "reactive"

    def __init__(self, hi: float = 0.8, lo: float = 0.3):
        self.hi = hi
        self.lo = lo

    def decide(self, state, demands):
        decision = reactive_threshold_decide(state, demands, self.hi, self.lo)
        return DecideResult(decision, _plan_for(state, demands, decision))


class OracleProvisioner(Provisioner):
    """Sees the true current-interval demands; everyone else sees t-1."""

    name = "oracle"

    def __init__(self, gamma: float | None = None, depth: int | None = None):
        self.gamma = gamma
        self.depth = depth

    def decide(self, state, demands):
        return oracle_decide(state, demands, self.gamma, self.depth)


class CilpProvisioner(Provisioner):
    name = "cilp"

    def __init__(self, model: CilpModel, gamma: float | None = None,
                 eta: float = DEFAULT_ETA):
        self.model = model
        self.gamma = gamma
        self.eta = eta

    def decide(self, state, demands):
        return cilp_decide(self.model, state, demands, self.gamma, self.eta)
