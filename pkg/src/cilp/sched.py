"""Deterministic best-fit-decreasing scheduler behind the f_sched interface.

Produces the bipartite workload→host placement plus the preemptive-migration
list for a provisioning decision. Unplaceable workloads are simply left out
(the simulator queues them), so scheduling never fails.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .domain import DemandVector, Host, VmCatalog

# absorbs float dust when sums of demands touch capacity exactly
CAPACITY_EPS = 1e-9


@dataclass(frozen=True)
class ProvisioningDecision:
    """VM types to create (multiset) and host ids to deallocate."""

    provisions: tuple[str, ...] = ()
    deallocations: frozenset[int] = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "provisions", tuple(self.provisions))
        object.__setattr__(self, "deallocations", frozenset(self.deallocations))

    @property
    def is_empty(self) -> bool:
        return not self.provisions and not self.deallocations

    def merged_with(self, other: "ProvisioningDecision") -> "ProvisioningDecision":
        return ProvisioningDecision(self.provisions + other.provisions,
                                    self.deallocations | other.deallocations)


@dataclass
class Schedule:
    """Bipartite placement (workload id -> host id) plus migrations out of d_t."""

    placements: dict[int, int] = field(default_factory=dict)
    migrations: list[tuple[int, int, int]] = field(default_factory=list)


def validate_decision(decision: ProvisioningDecision, hosts: Sequence[Host],
                      catalog: VmCatalog, live_workloads: int) -> None:
    """Raise unless the decision keeps the fleet legal."""
    active_ids = {h.id for h in hosts}
    for hid in decision.deallocations:
        if hid not in active_ids:
            raise ValueError(f"deallocation of unknown host {hid}")
    for name in decision.provisions:
        catalog.by_name(name)  # raises KeyError on unknown types
    after = len(hosts) + len(decision.provisions) - len(decision.deallocations)
    if after > catalog.max_hosts:
        raise ValueError(
            f"decision would exceed max_hosts ({after} > {catalog.max_hosts})")
    if live_workloads > 0 and decision.deallocations and after < 1:
        raise ValueError("cannot deallocate every host while workloads remain")


def expand_hosts(hosts: Sequence[Host], decision: ProvisioningDecision,
                 catalog: VmCatalog, next_host_id: int,
                 interval: int) -> tuple[list[Host], list[Host]]:
    """Post-decision host list: survivors plus freshly provisioned hosts.

    New host ids are allocated sequentially from next_host_id so a schedule
    built here matches the simulator step that applies the same decision.
    """
    survivors = [h for h in hosts if h.id not in decision.deallocations]
    created = []
    for offset, name in enumerate(decision.provisions):
        created.append(Host(id=next_host_id + offset, vm_type=catalog.by_name(name),
                            active_since=interval))
    return survivors + created, created


def remaining_capacity(host: Host, placements: dict[int, int],
                       demands: dict[int, DemandVector]) -> DemandVector:
    """Capacity minus demand placed on the host, componentwise."""
    used = np.zeros(3)
    for wid, hid in placements.items():
        if hid == host.id:
            used += demands[wid].as_array()
    cap = host.vm_type.capacity().as_array() - used
    return DemandVector(float(cap[0]), float(cap[1]), float(cap[2]))


def _fits(load: np.ndarray, demand: np.ndarray, capacity: np.ndarray) -> bool:
    return bool(np.all(load + demand <= capacity + CAPACITY_EPS))


def schedule(hosts: Sequence[Host], demands: dict[int, DemandVector],
             decision: ProvisioningDecision, prev_placements: dict[int, int],
             catalog: VmCatalog, next_host_id: int, interval: int = 0) -> Schedule:
    """Best-fit-decreasing placement over the post-decision hosts.

    Previously placed workloads stay put while their host survives and still
    fits them; workloads displaced by a deallocation are re-placed and
    recorded as migrations. Ties break toward the lowest host id.
    """
    post_hosts, _ = expand_hosts(hosts, decision, catalog, next_host_id, interval)
    by_id = {h.id: h for h in post_hosts}
    caps = {h.id: h.vm_type.capacity().as_array() for h in post_hosts}
    loads = {h.id: np.zeros(3) for h in post_hosts}

    placements: dict[int, int] = {}
    pool: list[int] = []
    displaced: dict[int, int] = {}  # wid -> deallocated source host

    for wid in sorted(demands):
        demand = demands[wid].as_array()
        prev = prev_placements.get(wid)
        if prev is not None and prev in decision.deallocations:
            displaced[wid] = prev
            pool.append(wid)
        elif prev is not None and prev in by_id and _fits(loads[prev], demand, caps[prev]):
            placements[wid] = prev
            loads[prev] += demand
        else:
            pool.append(wid)  # new, queued, or evicted by demand growth

    # largest cpu demand first; host with the least spare cpu that fits wins
    pool.sort(key=lambda wid: (-demands[wid].cpu, wid))
    migrations: list[tuple[int, int, int]] = []
    for wid in pool:
        demand = demands[wid].as_array()
        best_id = None
        best_spare = None
        for h in sorted(post_hosts, key=lambda h: h.id):
            if not _fits(loads[h.id], demand, caps[h.id]):
                continue
            spare = caps[h.id][0] - loads[h.id][0]
            if best_spare is None or spare < best_spare - CAPACITY_EPS:
                best_id, best_spare = h.id, spare
        if best_id is None:
            continue  # left unplaced; the simulator queues it
        placements[wid] = best_id
        loads[best_id] += demand
        if wid in displaced:
            migrations.append((wid, displaced[wid], best_id))

    return Schedule(placements=placements, migrations=migrations)
