"""Experiment runner: simulate episodes, train checkpoints, compare
provisioners, and sweep the cost weight. Emits tidy CSV/JSON artifacts.

Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
import time
from dataclasses import dataclass, field

import numpy as np

from . import cosim, domain, provision, sched, train
from .cosim import METRICS_COLUMNS, QoSReport, SimConfig
from .domain import Workload, workload_feature
from .model import CilpModel, ModelConfig
from .train import TrainConfig

PROVISIONERS = ("cilp", "reactive", "oracle", "none")


class ConfigError(ValueError):
    pass


@dataclass
class EpisodeConfig:
    delta_s: float = 300.0
    intervals: int = 200
    gamma: float = 0.5
    alpha: float = 1.0 / 3.0
    beta: float = 1.0 / 3.0
    delta_weight: float = 1.0 / 3.0
    seed: int = 0
    catalog_path: str | None = None
    trace_path: str | None = None
    synthetic: int | None = None       # synthetic template count
    arrival_rate: float | None = None
    provisioner: str = "reactive"
    checkpoint: str | None = None
    out_dir: str | None = None
    initial_hosts: tuple[str, ...] = ("B2s",)
    max_hosts: int | None = None
    sla_multiplier: float = 1.5
    eta: float = provision.DEFAULT_ETA
    oracle_depth: int | None = None
    hi: float = 0.8
    lo: float = 0.3
    label: str | None = None

    def __post_init__(self):
        if self.delta_s <= 0:
            raise ConfigError("delta_s must be > 0")
        if self.intervals < 1:
            raise ConfigError("intervals must be >= 1")
        if self.gamma < 0:
            raise ConfigError("gamma must be >= 0")
        weights = (self.alpha, self.beta, self.delta_weight)
        if any(w < 0 for w in weights) or abs(sum(weights) - 1.0) > 1e-9:
            raise ConfigError("alpha + beta + delta_weight must sum to 1")
        if self.provisioner not in PROVISIONERS:
            raise ConfigError(f"provisioner must be one of {PROVISIONERS}")
        self.initial_hosts = tuple(self.initial_hosts)

    @classmethod
    def from_file(cls, path: str) -> "EpisodeConfig":
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**doc)

    def with_overrides(self, **kwargs) -> "EpisodeConfig":
        clean = {k: v for k, v in kwargs.items() if v is not None}
        return dataclasses.replace(self, **clean)


def load_inputs(config: EpisodeConfig):
    catalog = (domain.load_catalog(config.catalog_path)
               if config.catalog_path else domain.default_catalog())
    if config.max_hosts is not None:
        catalog = dataclasses.replace(catalog, max_hosts=config.max_hosts)
    for name in config.initial_hosts:
        catalog.by_name(name)
    if config.trace_path:
        templates = domain.load_traces(config.trace_path, config.delta_s,
                                       config.sla_multiplier)
        arrivals = [(w.arrival_interval,
                     domain.instantiate(w, w.id, w.arrival_interval,
                                        config.delta_s, config.sla_multiplier))
                    for w in templates if w.arrival_interval < config.intervals]
    else:
        templates = domain.sinusoidal_templates(
            config.synthetic or 40, seed=config.seed,
            delta_s=config.delta_s, sla_multiplier=config.sla_multiplier)
        arrivals = domain.synthesize_arrivals(
            templates, config.intervals, config.seed, config.delta_s,
            config.sla_multiplier, rate=config.arrival_rate)
    return catalog, templates, arrivals


def build_provisioner(config: EpisodeConfig, catalog) -> provision.Provisioner:
    if config.provisioner == "none":
        return provision.Provisioner()
    if config.provisioner == "reactive":
        return provision.ReactiveProvisioner(config.hi, config.lo)
    if config.provisioner == "oracle":
        return provision.OracleProvisioner(depth=config.oracle_depth)
    model = (CilpModel.load(config.checkpoint) if config.checkpoint
             else CilpModel(ModelConfig(), seed=config.seed))
    return provision.CilpProvisioner(model, eta=config.eta)


def run_episode(config: EpisodeConfig):
    """Simulate one episode; returns (summary dict, per-interval reports)."""
    started = time.perf_counter()
    catalog, _, arrivals = load_inputs(config)
    provisioner = build_provisioner(config, catalog)
    sim_config = SimConfig(config.delta_s, config.gamma, config.alpha,
                           config.beta, config.delta_weight)
    state = cosim.new_state(catalog, config.seed, sim_config)
    state.hosts = train.initial_fleet(catalog, config.initial_hosts)
    state.next_host_id = len(state.hosts)

    by_t: dict[int, list[Workload]] = {}
    for t, w in arrivals:
        by_t.setdefault(t, []).append(w)

    reports: list[QoSReport] = []
    for t in range(config.intervals):
        for w in by_t.get(t, ()):
            cosim.add_workload(state, w)
        w_true = {wid: workload_feature(w, t)
                  for wid, w in state.workloads.items()}
        if provisioner.name == "oracle":
            view = w_true  # the oracle's privilege: true current demands
        else:
            view = {wid: workload_feature(w, t - 1)
                    for wid, w in state.workloads.items()}
        result = provisioner.decide(state, view)
        # execute against the true demands: the stable scheduler keeps the
        # decision's plan wherever it still fits
        plan = sched.schedule(state.hosts, w_true, result.decision,
                              state.placements, catalog, state.next_host_id,
                              state.t)
        reports.append(cosim.step(state, w_true, result.decision, plan))

    summary = summarize(config, state, reports)
    summary["wall_time_s"] = time.perf_counter() - started
    if config.out_dir:
        os.makedirs(config.out_dir, exist_ok=True)
        stem = config.label or f"{config.provisioner}_seed{config.seed}"
        write_metrics_csv(reports, os.path.join(config.out_dir, stem + ".csv"))
        with open(os.path.join(config.out_dir, stem + ".json"), "w",
                  encoding="utf-8") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True)
    return summary, reports


def summarize(config: EpisodeConfig, state, reports) -> dict:
    ledger = state.ledger
    completions = ledger.completions
    return {
        "label": config.label or config.provisioner,
        "provisioner": config.provisioner,
        "seed": config.seed,
        "intervals": len(reports),
        "mean_r": float(np.mean([r.r for r in reports])),
        "mean_cost_usd": float(np.mean([r.cost_usd for r in reports])),
        "mean_qos": float(np.mean([r.qos for r in reports])),
        "mean_reward": float(np.mean([r.reward for r in reports])),
        "total_cost_usd": float(sum(r.cost_usd for r in reports)),
        "total_energy_wh": float(sum(r.energy_wh for r in reports)),
        "mean_response_s": (float(np.mean([c.response_s for c in completions]))
                            if completions else 0.0),
        "sla_violation_fraction": (ledger.sla_violations / len(completions)
                                   if completions else 0.0),
        "migrations": ledger.migrations,
        "provision_overhead_s": ledger.provision_overhead_s,
        "completed": len(completions),
        "arrived": ledger.arrived,
        "live_at_end": len(state.workloads),
    }


def write_metrics_csv(reports, path: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRICS_COLUMNS)
        for r in reports:
            row = r.csv_row()
            writer.writerow([row[0]] + [repr(float(x)) for x in row[1:8]]
                            + [int(x) for x in row[8:]])


# ---------------------------------------------------------------------------
# multi-run commands


def seeded_runs(config: EpisodeConfig, seeds: int):
    summaries = []
    for k in range(seeds):
        cfg = config.with_overrides(seed=config.seed + k,
                                    out_dir=config.out_dir)
        summary, _ = run_episode(cfg)
        summaries.append(summary)
    return summaries


def checkpoint_train_time(path: str | None) -> float:
    if not path:
        return 0.0
    try:
        from .autodiff import ModelParams
        _, meta = ModelParams.load(path)
        return float(meta.get("train_time_s", 0.0))
    except (OSError, ValueError):
        return 0.0


def compare(configs: list[EpisodeConfig], seeds: int = 1) -> list[dict]:
    """Mean ± std of utilization, cost, and QoS per config over seeds."""
    rows = []
    for config in configs:
        summaries = seeded_runs(config, seeds)
        rows.append({
            "label": config.label or config.provisioner,
            "r_mean": float(np.mean([s["mean_r"] for s in summaries])),
            "r_std": float(np.std([s["mean_r"] for s in summaries])),
            "cost_mean": float(np.mean([s["mean_cost_usd"] for s in summaries])),
            "cost_std": float(np.std([s["mean_cost_usd"] for s in summaries])),
            "qos_mean": float(np.mean([s["mean_qos"] for s in summaries])),
            "qos_std": float(np.std([s["mean_qos"] for s in summaries])),
            "train_time_s": checkpoint_train_time(
                config.checkpoint if config.provisioner == "cilp" else None),
        })
    return rows


def sweep_gamma(config: EpisodeConfig, gammas: list[float],
                seeds: int = 1) -> list[dict]:
    rows = []
    for gamma in gammas:
        summaries = seeded_runs(config.with_overrides(gamma=gamma), seeds)
        rows.append({
            "gamma": gamma,
            "r_mean": float(np.mean([s["mean_r"] for s in summaries])),
            "cost_mean": float(np.mean([s["mean_cost_usd"] for s in summaries])),
            "qos_mean": float(np.mean([s["mean_qos"] for s in summaries])),
            "reward_mean": float(np.mean([s["mean_reward"] for s in summaries])),
        })
    return rows


def write_table(rows: list[dict], path: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


def train_command(args) -> int:
    config = _episode_config(args)
    catalog, templates, _ = load_inputs(config)
    sim_config = SimConfig(config.delta_s, config.gamma, config.alpha,
                           config.beta, config.delta_weight)
    started = time.perf_counter()
    rows = train.generate_dataset(
        templates, catalog, episodes=args.episodes, seed=config.seed,
        horizon=config.intervals, sim_config=sim_config,
        initial_hosts=config.initial_hosts, arrival_rate=config.arrival_rate)
    if args.dataset:
        train.save_dataset(rows, args.dataset)
    tc = TrainConfig(seed=config.seed,
                     learning_rate=args.lr, batch_size=args.batch_size,
                     max_epochs=args.epochs, patience=args.patience)
    model, history = train.fit(rows, catalog, tc)
    elapsed = time.perf_counter() - started
    model.params.save(args.out, extra={
        "config": dataclasses.asdict(model.config),
        "train_time_s": elapsed,
        "rows": len(rows),
        "final_val_loss": history[-1][2] if history else None,
    })
    train.save_history(history, os.path.splitext(args.out)[0] + "_history.csv")
    print(f"trained on {len(rows)} rows in {elapsed:.1f}s; "
          f"val loss {history[-1][2]:.6f}; checkpoint: {args.out}")
    return 0


def generate_data_command(args) -> int:
    config = _episode_config(args)
    catalog, templates, _ = load_inputs(config)
    sim_config = SimConfig(config.delta_s, config.gamma, config.alpha,
                           config.beta, config.delta_weight)
    rows = train.generate_dataset(
        templates, catalog, episodes=args.episodes, seed=config.seed,
        horizon=config.intervals, sim_config=sim_config,
        initial_hosts=config.initial_hosts, arrival_rate=config.arrival_rate)
    train.save_dataset(rows, args.out)
    print(f"wrote {len(rows)} rows to {args.out}.csv / .json")
    return 0


def _episode_config(args) -> EpisodeConfig:
    base = (EpisodeConfig.from_file(args.config) if getattr(args, "config", None)
            else EpisodeConfig())
    return base.with_overrides(
        seed=getattr(args, "seed", None),
        gamma=getattr(args, "gamma", None),
        intervals=getattr(args, "intervals", None),
        provisioner=getattr(args, "provisioner", None),
        checkpoint=getattr(args, "checkpoint", None),
        out_dir=getattr(args, "out_dir", None),
        trace_path=getattr(args, "traces", None),
        synthetic=getattr(args, "synthetic", None),
        catalog_path=getattr(args, "catalog", None),
    )


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="episode config JSON")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--gamma", type=float)
    parser.add_argument("--intervals", type=int)
    parser.add_argument("--traces", help="workload trace CSV")
    parser.add_argument("--synthetic", type=int,
                        help="synthesize N workload templates instead of traces")
    parser.add_argument("--catalog", help="VM catalog TOML")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cilp",
        description="Predictive VM provisioning lab: co-simulated twin, "
                    "imitation-learned provisioner, and comparators.")
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="run one episode")
    _add_common(sim)
    sim.add_argument("--provisioner", choices=PROVISIONERS)
    sim.add_argument("--checkpoint", help="model checkpoint for --provisioner cilp")
    sim.add_argument("--out", dest="out_dir", help="directory for CSV/JSON output")

    tr = sub.add_parser("train", help="generate labels and train a checkpoint")
    _add_common(tr)
    tr.add_argument("--episodes", type=int, default=6)
    tr.add_argument("--epochs", type=int, default=60)
    tr.add_argument("--lr", type=float, default=5e-4)
    tr.add_argument("--batch-size", type=int, default=64)
    tr.add_argument("--patience", type=int, default=8)
    tr.add_argument("--dataset", help="also cache the dataset at this prefix")
    tr.add_argument("--out", required=True, help="checkpoint path (JSON)")

    gd = sub.add_parser("generate-data", help="write the labeled dataset only")
    _add_common(gd)
    gd.add_argument("--episodes", type=int, default=6)
    gd.add_argument("--out", required=True, help="dataset path prefix")

    cmp_ = sub.add_parser("compare", help="mean ± std table across configs")
    cmp_.add_argument("--configs", nargs="+", required=True,
                      help="episode config JSON files")
    cmp_.add_argument("--seeds", type=int, default=1)
    cmp_.add_argument("--out", help="table CSV path")

    sweep = sub.add_parser("sweep-gamma", help="QoS/cost across gamma values")
    _add_common(sweep)
    sweep.add_argument("--provisioner", choices=PROVISIONERS)
    sweep.add_argument("--checkpoint")
    sweep.add_argument("--gammas", default="0,0.25,0.5,1.0",
                       help="comma-separated gamma values")
    sweep.add_argument("--seeds", type=int, default=1)
    sweep.add_argument("--out", help="sweep CSV path")

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "simulate":
            summary, _ = run_episode(_episode_config(args))
            print(json.dumps(summary, indent=2, sort_keys=True))
            return 0
        if args.command == "train":
            return train_command(args)
        if args.command == "generate-data":
            return generate_data_command(args)
        if args.command == "compare":
            configs = [EpisodeConfig.from_file(p) for p in args.configs]
            rows = compare(configs, seeds=args.seeds)
            if args.out:
                write_table(rows, args.out)
            print(json.dumps(rows, indent=2))
            return 0
        if args.command == "sweep-gamma":
            gammas = [float(g) for g in args.gammas.split(",")]
            rows = sweep_gamma(_episode_config(args), gammas, seeds=args.seeds)
            if args.out:
                write_table(rows, args.out)
            print(json.dumps(rows, indent=2))
            return 0
        raise ConfigError(f"unknown command {args.command}")
    except (ConfigError, FileNotFoundError, KeyError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"runtime error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
