"""Command-line entry point for partitioning, runs, sweeps, and diagnostics.

Subcommands:
  partition   build a label-skewed split and write its manifest
  run         execute federated runs for every (strategy, seed) pair
  solve       one-shot sampling-weight solve from a JSON problem
  sweep-sr    final accuracy across sampling ratios
  bounds      recompute bounds.csv from a run's diagnostics log

Exit codes: 1 config/validation, 2 I/O, 3 capacity. Set ISFL_THREADS to run
(strategy, seed) jobs concurrently.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diagnostics
from .data import (
    CapacityError,
    CategoryDistribution,
    PartitionConfig,
    generate_synthetic,
    load_csv_dataset,
    load_dataset,
    save_partition_manifest,
    select_probe_set,
    sort_and_partition,
    train_holdout_test_split,
)
from .federation import FederationConfig, RoundMetrics, derive_seed, run
from .isweights import compute_alpha, rho, solve_is_weights
from .model import ModelSpec
from .trainer import TrainerConfig

METRICS_HEADER = "round,loss,acc_S,acc_G,rho_mean,rho_theory"


@dataclass
class ExperimentConfig:
    """Flat experiment settings; every key is validated before any work starts."""

    classes: int = 10
    per_class: int = 1200
    dim: int = 32
    separation: float = 3.0
    dataset_path: str | None = None
    test_size: int = 1000
    holdout_size: int = 600
    clients: int = 20
    shard_size: int = 500
    shards_per_client: int = 2
    nr: float = 0.95
    hidden_dims: list[int] = field(default_factory=lambda: [16])
    activation: str = "relu"
    batch_size: int = 128
    local_epochs: int = 5
    eta: float = 1e-3
    sampling_ratio: float = 1.0
    rounds: int = 25
    strategies: list[str] = field(default_factory=lambda: ["fedavg", "isfl"])
    varpi: float = 0.05
    probe_size: int = 500
    seeds: list[int] = field(default_factory=lambda: [0])

    @classmethod
    def from_file(cls, path: str | Path) -> "ExperimentConfig":
        with open(path, "r", encoding="utf-8") as f:
            raw = json.load(f)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**raw)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        # Constructor-level checks run in the module dataclasses; this catches
        # cross-field problems before any heavy work.
        self.model_spec()
        self.trainer_config(seed=0)
        PartitionConfig(
            n_clients=self.clients,
            shard_size=self.shard_size,
            shards_per_client=self.shards_per_client,
            nr=self.nr,
        )
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        for strategy in self.strategies:
            if strategy not in ("fedavg", "rw_is", "gradnorm_is", "isfl"):
                raise ValueError(f"unknown strategy {strategy!r}")
        if not self.seeds:
            raise ValueError("need at least one seed")
        if self.dataset_path is None and self.per_class < 1:
            raise ValueError("per_class must be >= 1 for synthetic data")

    def model_spec(self) -> ModelSpec:
        return ModelSpec(
            input_dim=self.dim,
            hidden_dims=tuple(self.hidden_dims),
            n_classes=self.classes,
            activation=self.activation,
        )

    def trainer_config(self, seed: int, sampling_ratio: float | None = None) -> TrainerConfig:
        return TrainerConfig(
            batch_size=self.batch_size,
            local_epochs=self.local_epochs,
            eta=self.eta,
            sampling_ratio=self.sampling_ratio if sampling_ratio is None else sampling_ratio,
            seed=seed,
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def build_experiment_data(cfg: ExperimentConfig, seed: int):
    """Deterministic dataset, split, partition, and probe for one run seed."""
    if cfg.dataset_path is not None:
        path = Path(cfg.dataset_path)
        if path.suffix == ".csv":
            source = load_csv_dataset(path, n_classes=cfg.classes)
        else:
            source = load_dataset(path)
        if source.n_classes != cfg.classes or source.dim != cfg.dim:
            raise ValueError(
                f"dataset at {path} has shape ({source.dim} dims, "
                f"{source.n_classes} classes) but the config says "
                f"({cfg.dim}, {cfg.classes})"
            )
    else:
        source = generate_synthetic(
            cfg.classes, cfg.per_class, cfg.dim, cfg.separation,
            seed=derive_seed(seed, 10),
        )
    train, holdout, test = train_holdout_test_split(
        source, cfg.holdout_size, cfg.test_size, seed=derive_seed(seed, 11)
    )
    part_cfg = PartitionConfig(
        n_clients=cfg.clients,
        shard_size=cfg.shard_size,
        shards_per_client=cfg.shards_per_client,
        nr=cfg.nr,
        seed=derive_seed(seed, 12),
    )
    shards = sort_and_partition(train, part_cfg)
    probe = select_probe_set(
        holdout, min(cfg.probe_size, len(holdout)), seed=derive_seed(seed, 13)
    )
    return shards, probe, test


def run_id_of(payload: dict) -> str:
    canonical = json.dumps(payload, sort_keys=True).encode("utf-8")
    return hashlib.sha256(canonical).hexdigest()[:12]


def write_metrics_csv(metrics: list[RoundMetrics], pi: np.ndarray, path: Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(METRICS_HEADER + "\n")
        for m in metrics:
            if m.rho_realized is None:
                rho_mean = rho_theory = ""
            else:
                rho_mean = repr(float(m.rho_realized @ pi))
                rho_theory = repr(float(m.rho_theory @ pi))
            f.write(
                f"{m.round_index},{m.train_loss!r},{m.acc_test!r},"
                f"{m.acc_pool!r},{rho_mean},{rho_theory}\n"
            )


def write_timings_csv(metrics: list[RoundMetrics], path: Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("round,secs\n")
        for m in metrics:
            f.write(f"{m.round_index},{m.seconds:.6f}\n")


def execute_run(
    cfg: ExperimentConfig,
    strategy: str,
    seed: int,
    out_dir: Path,
    sampling_ratio: float | None = None,
) -> list[RoundMetrics]:
    """One federated run; writes metrics, manifest, and diagnostics artifacts."""
    shards, probe, test = build_experiment_data(cfg, seed)
    fed_cfg = FederationConfig(
        model=cfg.model_spec(),
        trainer=cfg.trainer_config(seed=0, sampling_ratio=sampling_ratio),
        n_rounds=cfg.rounds,
        strategy=strategy,
        varpi=cfg.varpi,
        probe_size=cfg.probe_size,
        seed=derive_seed(seed, 20),
    )
    recorder = diagnostics.RunLog() if strategy == "isfl" else None
    metrics = run(shards, fed_cfg, test, probe=probe, recorder=recorder)

    out_dir.mkdir(parents=True, exist_ok=True)
    pi = np.array([len(s) for s in shards], dtype=np.float64)
    pi /= pi.sum()
    manifest = {
        "config": cfg.to_dict(),
        "strategy": strategy,
        "seed": seed,
        "sampling_ratio": sampling_ratio if sampling_ratio is not None else cfg.sampling_ratio,
    }
    manifest["run_id"] = run_id_of(manifest)
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    write_metrics_csv(metrics, pi, out_dir / "metrics.csv")
    write_timings_csv(metrics, out_dir / "timings.csv")
    if recorder is not None and recorder.records:
        recorder.save_jsonl(out_dir / "diagnostics.jsonl")
        diagnostics.write_bounds_csv(recorder, out_dir / "bounds.csv")
        diagnostics.write_long_csv(recorder, out_dir / "long.csv")
    return metrics


def _max_workers() -> int:
    try:
        return max(1, int(os.environ.get("ISFL_THREADS", "1")))
    except ValueError:
        return 1


def _final_summary(results: dict) -> str:
    lines = ["strategy        acc_S            acc_G"]
    for strategy, per_seed in results.items():
        acc_s = np.array([m[-1].acc_test for m in per_seed])
        acc_g = np.array([m[-1].acc_pool for m in per_seed])
        std_s = acc_s.std(ddof=1) if acc_s.size > 1 else 0.0
        std_g = acc_g.std(ddof=1) if acc_g.size > 1 else 0.0
        lines.append(
            f"{strategy:<15} {acc_s.mean():.4f} +/- {std_s:.4f}"
            f"  {acc_g.mean():.4f} +/- {std_g:.4f}"
        )
    return "\n".join(lines)


def cmd_partition(args) -> int:
    cfg = ExperimentConfig.from_file(args.config)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    seed = args.seed if args.seed is not None else cfg.seeds[0]
    shards, _, _ = build_experiment_data(cfg, seed)
    save_partition_manifest(shards, out_dir / "partition_manifest.json")
    print(f"wrote {out_dir / 'partition_manifest.json'}")
    print("client  samples  histogram")
    for shard in shards:
        hist = np.bincount(
            shard.dataset.labels[shard.indices], minlength=shard.dataset.n_classes
        )
        print(f"{shard.client_id:>6}  {len(shard):>7}  {hist.tolist()}")
    return 0


def cmd_run(args) -> int:
    cfg = ExperimentConfig.from_file(args.config)
    out_dir = Path(args.out)
    seeds = [args.seed] if args.seed is not None else cfg.seeds
    jobs = [(strategy, seed) for strategy in cfg.strategies for seed in seeds]

    def one(job):
        strategy, seed = job
        return job, execute_run(cfg, strategy, seed, out_dir / f"{strategy}_seed{seed}")

    workers = _max_workers()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            finished = list(pool.map(one, jobs))
    else:
        finished = [one(job) for job in jobs]

    results: dict[str, list] = {s: [] for s in cfg.strategies}
    for (strategy, _), metrics in finished:
        results[strategy].append(metrics)
    print(_final_summary(results))
    return 0


def cmd_solve(args) -> int:
    if args.input == "-":
        raw = json.load(sys.stdin)
    else:
        with open(args.input, "r", encoding="utf-8") as f:
            raw = json.load(f)
    for key in ("p", "p_k", "L"):
        if key not in raw:
            raise ValueError(f"solve input is missing key {key!r}")
    p = CategoryDistribution(np.asarray(raw["p"], dtype=np.float64))
    p_k = CategoryDistribution(np.asarray(raw["p_k"], dtype=np.float64))
    l_row = np.asarray(raw["L"], dtype=np.float64)
    varpi = float(raw.get("varpi", 0.05))
    plan = solve_is_weights(p, p_k, l_row, varpi)
    alpha = compute_alpha(l_row)
    out = {
        "alpha": alpha.alphas.tolist(),
        "gamma_star": plan.gamma_star,
        "q": plan.q.probs.tolist(),
        "w": plan.w.tolist(),
        "rho": rho(plan.q, p, l_row),
    }
    text = json.dumps(out, indent=2, sort_keys=True)
    print(text)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(text + "\n")
    return 0


def cmd_sweep_sr(args) -> int:
    cfg = ExperimentConfig.from_file(args.config)
    ratios = [float(s) for s in args.sr.split(",") if s.strip()]
    for ratio in ratios:
        if not 0.0 < ratio <= 1.0:
            raise ValueError("sampling ratios must lie in (0, 1]")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    jobs = [
        (strategy, ratio, seed)
        for strategy in cfg.strategies
        for ratio in ratios
        for seed in cfg.seeds
    ]

    def one(job):
        strategy, ratio, seed = job
        metrics = execute_run(
            cfg, strategy, seed,
            out_dir / f"{strategy}_sr{ratio}_seed{seed}",
            sampling_ratio=ratio,
        )
        return job, metrics[-1]

    workers = _max_workers()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            finished = list(pool.map(one, jobs))
    else:
        finished = [one(job) for job in jobs]

    for (strategy, ratio, seed), final in finished:
        rows.append((strategy, ratio, seed, final.acc_test, final.acc_pool))
    with open(out_dir / "sweep_sr.csv", "w", encoding="utf-8") as f:
        f.write("strategy,sr,seed,acc_S,acc_G\n")
        for strategy, ratio, seed, acc_s, acc_g in rows:
            f.write(f"{strategy},{ratio!r},{seed},{acc_s!r},{acc_g!r}\n")
    print(f"wrote {out_dir / 'sweep_sr.csv'}")
    for strategy in cfg.strategies:
        for ratio in ratios:
            accs = [r[4] for r in rows if r[0] == strategy and r[1] == ratio]
            print(f"{strategy:<15} SR={ratio:<5} acc_G mean {np.mean(accs):.4f}")
    return 0


def cmd_bounds(args) -> int:
    run_dir = Path(args.run_dir)
    log = diagnostics.RunLog.load_jsonl(run_dir / "diagnostics.jsonl")
    diagnostics.write_bounds_csv(log, run_dir / "bounds.csv")
    diagnostics.write_long_csv(log, run_dir / "long.csv")
    print(f"wrote {run_dir / 'bounds.csv'} and {run_dir / 'long.csv'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="isfl", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_part = sub.add_parser("partition", help="write a partition manifest")
    p_part.add_argument("--config", required=True)
    p_part.add_argument("--out", default="out")
    p_part.add_argument("--seed", type=int, default=None)
    p_part.set_defaults(func=cmd_partition)

    p_run = sub.add_parser("run", help="run every (strategy, seed) pair")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--out", default="out")
    p_run.add_argument("--seed", type=int, default=None)
    p_run.set_defaults(func=cmd_run)

    p_solve = sub.add_parser("solve", help="one-shot weight solve from JSON")
    p_solve.add_argument("--input", required=True, help="path or - for stdin")
    p_solve.add_argument("--out", default=None)
    p_solve.set_defaults(func=cmd_solve)

    p_sweep = sub.add_parser("sweep-sr", help="sweep sampling ratios")
    p_sweep.add_argument("--config", required=True)
    p_sweep.add_argument("--sr", default="0.1,0.5,1.0")
    p_sweep.add_argument("--out", default="out")
    p_sweep.set_defaults(func=cmd_sweep_sr)

    p_bounds = sub.add_parser("bounds", help="recompute bound diagnostics")
    p_bounds.add_argument("--run-dir", required=True)
    p_bounds.set_defaults(func=cmd_bounds)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CapacityError as exc:
        print(f"capacity error: {exc}", file=sys.stderr)
        return 3
    except (ValueError, json.JSONDecodeError, TypeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
