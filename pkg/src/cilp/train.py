"""Imitation-learning pipeline: the twin labels every candidate action by
rewinding it through what_if, and the two-headed model trains against those
labels plus next-interval demand targets.
"""

from __future__ import annotations

import copy
import csv
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import cosim, provision, sched
from .autodiff import Tensor
from .cosim import SimConfig, SimState
from .domain import DemandVector, Host, VmCatalog, Workload, workload_feature
from .model import ActionFeature, CilpModel, FeatureScale, ModelConfig

PROB_CLAMP = 1e-7


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 5e-4
    weight_decay: float = 1e-5
    batch_size: int = 64
    max_epochs: int = 60
    patience: int = 8
    split: float = 0.8
    seed: int = 0
    chunk_rows: int = 200  # contiguous shuffle unit, keeps short-range order

    def __post_init__(self):
        for name in ("learning_rate", "weight_decay", "batch_size", "max_epochs",
                     "patience", "chunk_rows"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 < self.split < 1.0:
            raise ValueError("split must be in (0, 1)")


@dataclass
class TrainingRow:
    """One decision point: schedule snapshot, demands, candidates, labels."""

    episode: int
    interval: int
    workload_ids: list[int]
    w_prev: np.ndarray           # (n, 3) raw units, rows by workload_ids
    w_next: np.ndarray           # (n, 3) raw units, the demand target
    hosts: list[tuple[int, str]]  # (host id, vm type name)
    placements: dict[int, int]
    candidates: list[ActionFeature]
    labels: np.ndarray           # (n_candidates,) in {0, 1}


# ---------------------------------------------------------------------------
# dataset generation


def initial_fleet(catalog: VmCatalog, names: Sequence[str]) -> list[Host]:
    return [Host(i, catalog.by_name(n), active_since=-1)
            for i, n in enumerate(names)]


def _demand_matrix(ids: Sequence[int], demands: dict[int, DemandVector]) -> np.ndarray:
    if not ids:
        return np.zeros((0, 3))
    return np.stack([demands[w].as_array() for w in ids])


def label_candidates(state: SimState, w_prev: dict[int, DemandVector],
                     cands: Sequence[ActionFeature]) -> np.ndarray:
    """g_i = 1 iff adding candidate i strictly improves the twin's reward."""
    base_plan = provision._plan_for(state, w_prev, sched.ProvisioningDecision())
    r0 = cosim.what_if(state, w_prev, sched.ProvisioningDecision(), base_plan).reward

    def score(c: ActionFeature) -> int:
        d = provision._single(c)
        plan = provision._plan_for(state, w_prev, d)
        r1 = cosim.what_if(state, w_prev, d, plan).reward
        return 1 if r1 > r0 else 0  # ties break toward 0

    return np.array(provision._map_ordered(score, list(cands)), dtype=np.int64)


def generate_dataset(templates: Sequence[Workload], catalog: VmCatalog,
                     episodes: int, seed: int, horizon: int = 50,
                     sim_config: SimConfig | None = None,
                     explore: float = 0.1,
                     initial_hosts: Sequence[str] = ("B2s",),
                     arrival_rate: float | None = None,
                     collect_states: bool = False):
    """Roll episodes under the reactive policy (plus random legal actions) and
    label every candidate at every interval via paired what_if evaluations.

    Returns the row list; with collect_states also the pre-decision state
    snapshots for independent re-verification.
    """
    from .domain import synthesize_arrivals

    sim_config = sim_config or SimConfig()
    rows: list[TrainingRow] = []
    snapshots = []
    for ep in range(episodes):
        ep_seed = seed * 100003 + ep
        arrivals = synthesize_arrivals(templates, horizon, ep_seed,
                                       delta_s=sim_config.delta_s,
                                       rate=arrival_rate)
        by_t: dict[int, list[Workload]] = {}
        for t, w in arrivals:
            by_t.setdefault(t, []).append(w)
        state = cosim.new_state(catalog, ep_seed + 1, sim_config)
        state.hosts = initial_fleet(catalog, initial_hosts)
        state.next_host_id = len(state.hosts)
        explore_rng = np.random.default_rng(ep_seed + 2)

        for t in range(horizon):
            for w in by_t.get(t, ()):
                cosim.add_workload(state, w)
            w_prev = {wid: workload_feature(w, t - 1)
                      for wid, w in state.workloads.items()}
            w_true = {wid: workload_feature(w, t)
                      for wid, w in state.workloads.items()}
            cands = provision.candidates(state, w_prev)
            labels = label_candidates(state, w_prev, cands)
            ids = sorted(state.workloads)
            rows.append(TrainingRow(
                episode=ep, interval=t, workload_ids=ids,
                w_prev=_demand_matrix(ids, w_prev),
                w_next=_demand_matrix(ids, w_true),
                hosts=sorted((h.id, h.vm_type.name) for h in state.hosts),
                placements=dict(state.placements),
                candidates=list(cands), labels=labels))
            if collect_states:
                snapshots.append((copy.deepcopy(state), dict(w_prev)))

            roll = explore_rng.random()
            decision = sched.ProvisioningDecision()
            if roll < explore:
                acts = provision.legal_actions(state, decision)
                if acts:
                    kind, ref = acts[int(explore_rng.integers(len(acts)))]
                    decision = provision._single_action(kind, ref)
            else:
                decision = provision.reactive_threshold_decide(state, w_prev)
            plan = provision._plan_for(state, w_true, decision)
            cosim.step(state, w_true, decision, plan)

    if collect_states:
        return rows, snapshots
    return rows


# ---------------------------------------------------------------------------
# dataset cache (CSV for the per-candidate table, JSON sidecar for structure)


def save_dataset(rows: Sequence[TrainingRow], prefix: str) -> None:
    with open(prefix + ".csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["row", "candidate", "kind", "host_id", "vm_type",
                         "label", "f0", "f1", "f2", "f3", "f4", "f5"])
        for i, row in enumerate(rows):
            for j, (c, g) in enumerate(zip(row.candidates, row.labels)):
                writer.writerow([i, j, c.kind,
                                 "" if c.host_id is None else c.host_id,
                                 c.vm_type or "", int(g),
                                 *[repr(float(x)) for x in c.features]])
    doc = {"version": 1, "rows": [{
        "episode": r.episode, "interval": r.interval,
        "workload_ids": r.workload_ids,
        "w_prev": r.w_prev.tolist(), "w_next": r.w_next.tolist(),
        "hosts": r.hosts,
        "placements": sorted(r.placements.items()),
    } for r in rows]}
    with open(prefix + ".json", "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def load_dataset(prefix: str) -> list[TrainingRow]:
    with open(prefix + ".json", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("version") != 1:
        raise ValueError("unsupported dataset version")
    shells = []
    for rec in doc["rows"]:
        shells.append(TrainingRow(
            episode=rec["episode"], interval=rec["interval"],
            workload_ids=list(rec["workload_ids"]),
            w_prev=np.asarray(rec["w_prev"], dtype=np.float64).reshape(-1, 3),
            w_next=np.asarray(rec["w_next"], dtype=np.float64).reshape(-1, 3),
            hosts=[(int(h), str(n)) for h, n in rec["hosts"]],
            placements={int(w): int(h) for w, h in rec["placements"]},
            candidates=[], labels=np.zeros(0, dtype=np.int64)))
    per_row: dict[int, list] = {}
    with open(prefix + ".csv", newline="", encoding="utf-8") as fh:
        for rec in csv.DictReader(fh):
            feats = np.array([float(rec[f"f{k}"]) for k in range(6)])
            cand = ActionFeature(
                kind=rec["kind"],
                host_id=int(rec["host_id"]) if rec["host_id"] else None,
                vm_type=rec["vm_type"] or None,
                features=feats)
            per_row.setdefault(int(rec["row"]), []).append(
                (int(rec["candidate"]), cand, int(rec["label"])))
    for i, row in enumerate(shells):
        entries = sorted(per_row.get(i, []))
        row.candidates = [c for _, c, _ in entries]
        row.labels = np.array([g for _, _, g in entries], dtype=np.int64)
    return shells


# ---------------------------------------------------------------------------
# losses


def _bce_terms(labels: np.ndarray, scores: Tensor) -> Tensor:
    """Per-candidate ½-weighted binary cross entropies, probabilities clamped."""
    g = np.asarray(labels, dtype=np.float64)
    p = ad.clip(scores, PROB_CLAMP, 1.0 - PROB_CLAMP)
    pos = ad.mul(Tensor(g), ad.log(p))
    neg = ad.mul(Tensor(1.0 - g), ad.log(ad.sub(Tensor(np.ones_like(g)), p)))
    return ad.mul(Tensor(-0.5), ad.add(pos, neg))


def bce_loss(labels, scores) -> Tensor:
    """Mean over candidates of -½(g·log l + (1-g)·log(1-l))."""
    scores = scores if isinstance(scores, Tensor) else Tensor(np.atleast_1d(scores))
    labels = np.atleast_1d(np.asarray(labels, dtype=np.float64))
    return ad.tmean(_bce_terms(labels, scores))


def mse_loss(w_hat: Tensor, target: np.ndarray) -> Tensor:
    """Squared error summed over entries, divided by the row count."""
    target = np.asarray(target, dtype=np.float64)
    n = target.shape[0] if target.ndim > 1 else 1
    if target.size == 0:
        return Tensor(0.0)
    diff = ad.sub(w_hat, Tensor(target))
    return ad.mul(ad.tsum(ad.mul(diff, diff)), Tensor(1.0 / n))


def total_loss(w_hat: Tensor, scores: Tensor, row: TrainingRow,
               scale: FeatureScale) -> Tensor:
    """Demand MSE plus the sum of per-candidate imitation losses."""
    loss = mse_loss(w_hat, scale.demand_matrix(row.w_next))
    if len(row.candidates):
        loss = ad.add(loss, ad.tsum(_bce_terms(row.labels, scores)))
    return loss


def row_loss(model: CilpModel, row: TrainingRow, catalog: VmCatalog,
             scale: FeatureScale) -> Tensor:
    hosts = [Host(hid, catalog.by_name(name), active_since=0)
             for hid, name in row.hosts]
    demands = {wid: DemandVector(*row.w_prev[i])
               for i, wid in enumerate(row.workload_ids)}
    from .model import ScheduleGraph
    graph = ScheduleGraph.build(hosts, row.placements, demands, scale)
    w_prev_norm = scale.demand_matrix(row.w_prev)
    w_hat, scores = model.forward(graph, w_prev_norm, row.candidates)
    return total_loss(w_hat, scores, row, scale)


# ---------------------------------------------------------------------------
# optimizer and the fit loop


class AdamW:
    """Bias-corrected adaptive moments with decoupled weight decay."""

    def __init__(self, params, lr: float, weight_decay: float = 0.0,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(p.values) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.values) for name, p in params.items()}

    def step(self) -> None:
        self.t += 1
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[name] = self.b1 * self.m[name] + (1 - self.b1) * g
            self.v[name] = self.b2 * self.v[name] + (1 - self.b2) * g * g
            m_hat = self.m[name] / (1 - self.b1 ** self.t)
            v_hat = self.v[name] / (1 - self.b2 ** self.t)
            p.values = p.values - self.lr * (
                m_hat / (np.sqrt(v_hat) + self.eps) + self.weight_decay * p.values)


def _chunked_order(n: int, chunk: int, rng: np.random.Generator) -> list[int]:
    """Row order with contiguous chunks kept intact, chunk order shuffled."""
    starts = list(range(0, n, chunk))
    rng.shuffle(starts)
    order = []
    for s in starts:
        order.extend(range(s, min(s + chunk, n)))
    return order


def split_rows(rows: Sequence[TrainingRow], config: TrainConfig,
               rng: np.random.Generator) -> tuple[list[TrainingRow], list[TrainingRow]]:
    n = len(rows)
    if n < 2:
        raise ValueError("need at least 2 rows to split train/validation")
    chunk = config.chunk_rows
    starts = list(range(0, n, chunk))
    if len(starts) >= 2:
        rng.shuffle(starts)
        n_train = min(len(starts) - 1, max(1, round(config.split * len(starts))))
        train_idx = [i for s in starts[:n_train] for i in range(s, min(s + chunk, n))]
        val_idx = [i for s in starts[n_train:] for i in range(s, min(s + chunk, n))]
    else:
        idx = list(range(n))
        rng.shuffle(idx)
        n_train = min(n - 1, max(1, round(config.split * n)))
        train_idx, val_idx = idx[:n_train], idx[n_train:]
    return [rows[i] for i in train_idx], [rows[i] for i in val_idx]


def fit(rows: Sequence[TrainingRow], catalog: VmCatalog,
        config: TrainConfig | None = None,
        model_config: ModelConfig | None = None,
        model: CilpModel | None = None):
    """Train to convergence with early stopping; returns the best-validation
    model and the per-epoch history [(epoch, train_loss, val_loss), ...].
    """
    config = config or TrainConfig()
    rng = np.random.default_rng(config.seed)
    scale = FeatureScale.from_catalog(catalog)
    if model is None:
        model = CilpModel(model_config or ModelConfig(), seed=config.seed)
    train_rows, val_rows = split_rows(rows, config, rng)
    opt = AdamW(model.params, config.learning_rate, config.weight_decay)

    def eval_loss(subset) -> float:
        return float(np.mean([row_loss(model, r, catalog, scale).item()
                              for r in subset]))

    history: list[tuple[int, float, float]] = []
    best_val = math.inf
    best_values = model.params.copy_values()
    bad_epochs = 0
    for epoch in range(config.max_epochs):
        order = _chunked_order(len(train_rows), config.chunk_rows, rng)
        epoch_losses = []
        for start in range(0, len(order), config.batch_size):
            batch = [train_rows[i] for i in order[start:start + config.batch_size]]
            model.params.zero_grad()
            for r in batch:
                loss = row_loss(model, r, catalog, scale)
                epoch_losses.append(loss.item())
                ad.backward(ad.mul(loss, Tensor(1.0 / len(batch))))
            opt.step()
        train_loss = float(np.mean(epoch_losses))
        val_loss = eval_loss(val_rows)
        if not (math.isfinite(train_loss) and math.isfinite(val_loss)):
            raise RuntimeError(
                f"non-finite loss at epoch {epoch}: train={train_loss} val={val_loss}")
        history.append((epoch, train_loss, val_loss))
        if val_loss < best_val:
            best_val = val_loss
            best_values = model.params.copy_values()
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= config.patience:
                break
    model.params.load_values(best_values)
    return model, history


def save_history(history: Sequence[tuple[int, float, float]], path: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "train_loss", "val_loss"])
        for epoch, train, val in history:
            writer.writerow([epoch, repr(train), repr(val)])
