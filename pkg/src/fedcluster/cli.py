"""Configuration-driven command line entry point.

Commands:
  run              full federated experiment from a config file
  baseline-kmeans  pooled k-means on stored representations
  partition        split a dataset into per-client shard files
  eval             score a prediction file against ground truth

Config files are flat ``key = value`` text (a TOML-style subset); every key
can be overridden with a ``--key value`` flag, and flags win.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import sys
import time
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .datasets import PartitionSpec, load_dataset, partition, partition_indices, save_dataset
from .evaluation import accuracy, nmi
from .exceptions import FedClusterError, InvalidInputError
from .federation import RunSettings, server_run
from .model import save_model
from .numerics import Rng, kmeans

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


@dataclass
class ExperimentConfig:
    dataset: str = ""
    k: int = 0
    m: int = 4
    rho: int = 0
    lam: float | None = None       # config key "lambda"; None = per-dataset default
    epsilon: float = 0.1
    batch_size: int = 200
    rounds: int = 40
    local_iters: int = 100
    tau: int = 3
    adapter_lr: float = 5e-6
    head_lr: float = 5e-4
    seed: int = 0
    adapter_enabled: bool = True
    schedule_updates: int = 0      # 0 = one refresh per local epoch equivalent
    hidden: int = 0                # 0 = same as input width
    workers: int = 1
    sinkhorn_max_iters: int = 200
    sinkhorn_tol: float = 1e-6
    output_dir: str = "runs"

    def validate(self) -> None:
        if not self.dataset:
            raise InvalidInputError("config must set 'dataset'")
        if self.k < 1:
            raise InvalidInputError("config must set k >= 1")
        for name in ("m", "rounds", "local_iters", "tau", "batch_size", "workers"):
            if getattr(self, name) < 1:
                raise InvalidInputError(f"{name} must be >= 1")
        if self.rho not in (0, 1, 2, 3, 4):
            raise InvalidInputError("rho must be in 0..4")
        if self.epsilon <= 0:
            raise InvalidInputError("epsilon must be > 0")
        if self.lam is not None and self.lam < 0:
            raise InvalidInputError("lambda must be >= 0")


_CONFIG_KEYS = {("lambda" if f.name == "lam" else f.name): f.name for f in fields(ExperimentConfig)}


def _coerce(key: str, raw: str):
    attr = _CONFIG_KEYS[key]
    if attr in ("dataset", "output_dir"):
        return raw
    if attr == "adapter_enabled":
        low = raw.strip().lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise InvalidInputError(f"cannot parse boolean {key} = {raw!r}")
    if attr in ("lam", "epsilon", "adapter_lr", "head_lr", "sinkhorn_tol"):
        return float(raw)
    return int(raw)


def parse_config_text(text: str) -> dict:
    """Flat key=value lines; '#' starts a comment; quotes around values optional."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise InvalidInputError(f"config line {lineno}: expected key = value")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        raw = raw.strip("\"'")
        if key not in _CONFIG_KEYS:
            raise InvalidInputError(f"config line {lineno}: unknown key {key!r}")
        values[_CONFIG_KEYS[key]] = _coerce(key, raw)
    return values


def load_config(path, overrides: dict | None = None) -> ExperimentConfig:
    values = parse_config_text(Path(path).read_text())
    values.update(overrides or {})
    cfg = ExperimentConfig(**values)
    cfg.validate()
    return cfg


def format_json(obj, indent: int = 0) -> str:
    """JSON with every float rendered at 17 significant digits."""
    pad = "  " * indent
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = ",\n".join(
            f'{pad}  "{key}": {format_json(obj[key], indent + 1)}'
            for key in sorted(obj)
        )
        return "{\n" + items + "\n" + pad + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        items = ",\n".join(f"{pad}  {format_json(v, indent + 1)}" for v in obj)
        return "[\n" + items + "\n" + pad + "]"
    if isinstance(obj, bool):
        return "true" if obj else "false"
    if obj is None:
        return "null"
    if isinstance(obj, float):
        if obj != obj:
            return "null"
        return format(obj, ".17g")
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, str):
        return '"' + obj.replace("\\", "\\\\").replace('"', '\\"') + '"'
    raise InvalidInputError(f"cannot serialize {type(obj)!r}")


def resolve_lambda(cfg: ExperimentConfig, source_name: str) -> float:
    if cfg.lam is not None:
        return cfg.lam
    return 0.01 if "stackoverflow" in source_name.lower() else 1.0


def _config_snapshot(cfg: ExperimentConfig, lam: float) -> str:
    lines = []
    for f in fields(ExperimentConfig):
        key = "lambda" if f.name == "lam" else f.name
        value = lam if f.name == "lam" else getattr(cfg, f.name)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def _make_run_dir(cfg: ExperimentConfig, snapshot: str) -> Path:
    run_id = hashlib.sha1(snapshot.encode("utf-8")).hexdigest()[:12]
    stem = Path(cfg.dataset).stem or "run"
    base = Path(cfg.output_dir)
    base.mkdir(parents=True, exist_ok=True)
    candidate = base / f"{stem}-{run_id}"
    suffix = 1
    while candidate.exists():
        suffix += 1
        candidate = base / f"{stem}-{run_id}-{suffix}"
    candidate.mkdir()
    return candidate


def cmd_run(cfg: ExperimentConfig) -> int:
    try:
        ds = load_dataset(cfg.dataset)
    except (OSError, FedClusterError) as exc:
        print(f"error: cannot load dataset {cfg.dataset!r}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    lam = resolve_lambda(cfg, ds.source_name)
    spec = PartitionSpec(
        mode="iid" if cfg.rho == 0 else "skew", m=cfg.m, rho=cfg.rho, seed=cfg.seed
    )
    try:
        shards = partition(ds, spec)
    except FedClusterError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    settings = RunSettings(
        k=cfg.k,
        rounds=cfg.rounds,
        local_iters=cfg.local_iters,
        batch_size=cfg.batch_size,
        epsilon=cfg.epsilon,
        lam=lam,
        tau=cfg.tau,
        adapter_lr=cfg.adapter_lr,
        head_lr=cfg.head_lr,
        adapter_enabled=cfg.adapter_enabled,
        hidden=cfg.hidden or None,
        schedule_updates=cfg.schedule_updates,
        seed=cfg.seed,
        workers=cfg.workers,
        sinkhorn_max_iters=cfg.sinkhorn_max_iters,
        sinkhorn_tol=cfg.sinkhorn_tol,
    )
    snapshot = _config_snapshot(cfg, lam)
    run_dir = _make_run_dir(cfg, snapshot)
    (run_dir / "config.txt").write_text(snapshot)
    start = time.perf_counter()
    try:
        outcome = server_run(shards, settings)
    except FedClusterError as exc:
        print(f"error: run aborted: {exc}", file=sys.stderr)
        reports = getattr(exc, "reports", [])
        with open(run_dir / "rounds.jsonl", "w") as f:
            for report in reports:
                f.write(report.to_json() + "\n")
        return EXIT_RUNTIME
    wall = time.perf_counter() - start

    with open(run_dir / "rounds.jsonl", "w") as f:
        for report in outcome.reports:
            f.write(report.to_json() + "\n")
    metrics = {
        "dataset": ds.source_name,
        "n": ds.n,
        "d": ds.d,
        "k": cfg.k,
        "m": cfg.m,
        "rho": cfg.rho,
        "lambda": lam,
        "seed": cfg.seed,
        "rounds": cfg.rounds,
        "acc": outcome.acc,
        "nmi": outcome.nmi,
        "per_round": {
            "acc": [r.acc for r in outcome.reports],
            "nmi": [r.nmi for r in outcome.reports],
            "l_c": [r.l_c for r in outcome.reports],
            "l_a": [r.l_a for r in outcome.reports],
            "kept_fraction": [r.kept_fraction for r in outcome.reports],
        },
    }
    (run_dir / "metrics.json").write_text(format_json(metrics) + "\n")
    # predictions come back in pooled-shard order; undo the partition so row i
    # of the file corresponds to row i of the input dataset
    pooled_order = np.concatenate(partition_indices(ds.n, spec))
    predictions = np.empty(ds.n, dtype=np.int64)
    predictions[pooled_order] = outcome.predictions
    np.savetxt(run_dir / "predictions.txt", predictions, fmt="%d")
    save_model(outcome.global_model, run_dir / "global_model.fstm")
    results_path = Path(cfg.output_dir) / "results.csv"
    new_file = not results_path.exists()
    with open(results_path, "a", newline="") as f:
        writer = csv.writer(f)
        if new_file:
            writer.writerow(
                ["dataset", "m", "rho", "lambda", "seed", "acc", "nmi", "rounds", "wall_s"]
            )
        writer.writerow(
            [
                ds.source_name,
                cfg.m,
                cfg.rho,
                format(lam, ".17g"),
                cfg.seed,
                "" if outcome.acc is None else format(outcome.acc, ".17g"),
                "" if outcome.nmi is None else format(outcome.nmi, ".17g"),
                cfg.rounds,
                format(wall, ".3f"),
            ]
        )
    acc_text = "n/a" if outcome.acc is None else f"{outcome.acc:.4f}"
    nmi_text = "n/a" if outcome.nmi is None else f"{outcome.nmi:.4f}"
    print(f"run complete: acc={acc_text} nmi={nmi_text} dir={run_dir}")
    return EXIT_OK


def cmd_baseline_kmeans(data_path: str, k: int, seed: int = 0) -> int:
    try:
        ds = load_dataset(data_path)
    except (OSError, FedClusterError) as exc:
        print(f"error: cannot load dataset {data_path!r}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if ds.labels is None:
        print("error: baseline requires a labeled dataset", file=sys.stderr)
        return EXIT_CONFIG
    result = kmeans(ds.x, k, Rng(seed).child("baseline-kmeans"))
    acc_val = accuracy(ds.labels, result.assignments, max(k, int(ds.labels.max()) + 1))
    nmi_val = nmi(ds.labels, result.assignments)
    print(f"baseline-kmeans: acc={acc_val:.4f} nmi={nmi_val:.4f}")
    return EXIT_OK


def cmd_partition(data_path: str, mode: str, m: int, rho: int, seed: int, out_dir: str) -> int:
    try:
        ds = load_dataset(data_path)
        spec = PartitionSpec(mode=mode, m=m, rho=rho, seed=seed)
        shards = partition(ds, spec)
    except (OSError, FedClusterError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(data_path).stem
    for i, shard in enumerate(shards):
        path = out / f"{stem}-shard{i}.fstc"
        save_dataset(shard, path)
        print(f"wrote {path} ({shard.n} rows)")
    return EXIT_OK


def _read_labels(path: str) -> np.ndarray:
    p = Path(path)
    with open(p, "rb") as f:
        head = f.read(4)
    if head == b"FSTC":
        ds = load_dataset(p)
        if ds.labels is None:
            raise InvalidInputError(f"{path} has no labels")
        return ds.labels
    return np.loadtxt(p, dtype=np.int64).reshape(-1)


def cmd_eval(pred_path: str, truth_path: str) -> int:
    try:
        pred = _read_labels(pred_path)
        truth = _read_labels(truth_path)
        k = int(max(pred.max(), truth.max())) + 1
        acc_val = accuracy(truth, pred, k)
        nmi_val = nmi(truth, pred)
    except (OSError, FedClusterError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(f"eval: acc={acc_val:.4f} nmi={nmi_val:.4f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedcluster", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run a federated experiment from a config file")
    run_p.add_argument("--config", required=True)
    for key in _CONFIG_KEYS:
        run_p.add_argument(f"--{key.replace('_', '-')}", dest=f"opt_{_CONFIG_KEYS[key]}")

    base_p = sub.add_parser("baseline-kmeans", help="pooled k-means baseline")
    base_p.add_argument("--data", required=True)
    base_p.add_argument("--k", type=int, required=True)
    base_p.add_argument("--seed", type=int, default=0)

    part_p = sub.add_parser("partition", help="write per-client shard files")
    part_p.add_argument("--data", required=True)
    part_p.add_argument("--mode", choices=("iid", "skew"), required=True)
    part_p.add_argument("--m", type=int, required=True)
    part_p.add_argument("--rho", type=int, default=0)
    part_p.add_argument("--seed", type=int, default=0)
    part_p.add_argument("--out-dir", default="shards")

    eval_p = sub.add_parser("eval", help="score predictions against ground truth")
    eval_p.add_argument("--pred", required=True)
    eval_p.add_argument("--truth", required=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "run":
        overrides = {}
        for key, attr in _CONFIG_KEYS.items():
            raw = getattr(args, f"opt_{attr}", None)
            if raw is not None:
                try:
                    overrides[attr] = _coerce(key, raw)
                except (InvalidInputError, ValueError) as exc:
                    print(f"error: bad flag --{key}: {exc}", file=sys.stderr)
                    return EXIT_CONFIG
        try:
            cfg = load_config(args.config, overrides)
        except (OSError, FedClusterError, TypeError, ValueError) as exc:
            print(f"error: bad config: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        return cmd_run(cfg)
    if args.command == "baseline-kmeans":
        return cmd_baseline_kmeans(args.data, args.k, args.seed)
    if args.command == "partition":
        return cmd_partition(args.data, args.mode, args.m, args.rho, args.seed, args.out_dir)
    if args.command == "eval":
        return cmd_eval(args.pred, args.truth)
    return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
