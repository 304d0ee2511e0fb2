"""Command-line experiment runner.

Configuration is a plain ``key = value`` file (``#`` starts a comment) whose
keys are the fields of :class:`ExperimentConfig`. Command-line flags override
file values; ``--set key=value`` reaches any key without a dedicated flag.

Outputs in ``out``:

``metrics.csv``
    One row per evaluation: ``global_round, aggregation_rounds, strategy, hr,
    ndcg, transmitted_params, transmitted_bytes, mask_params``. Only
    deterministic columns, so reruns are byte-identical.
``timings.csv``
    Per-client wall times: ``global_round, aggregation_round, client_id,
    local_seconds, mask_seconds``.
``summary.json``
    Final and best metrics, dataset statistics, the config echo and runtime.

Exit codes: 0 success, 1 config error, 2 data error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .aggregate import Strategy
from .dataset import InteractionDataset, Schema, binarize_and_filter, leave_one_out_split, load_interactions
from .errors import ConfigError, DataError, FedNCFError
from .fedsim import BYTES_PER_PARAM, RoundRecord, TrainingPlan, train_centralized, train_federated, transmitted_per_client
from .model import ModelConfig
from .secagg import count_masked_parameters

log = logging.getLogger(__name__)

METRICS_COLUMNS = (
    "global_round",
    "aggregation_rounds",
    "strategy",
    "hr",
    "ndcg",
    "transmitted_params",
    "transmitted_bytes",
    "mask_params",
)
TIMING_COLUMNS = ("global_round", "aggregation_round", "client_id", "local_seconds", "mask_seconds")
COST_COLUMNS = ("model", "clients", "generated_params", "generated_bytes", "transmitted_params", "transmitted_bytes")

_SEPARATORS = {"tab": "\t", "comma": ",", "space": " ", "semicolon": ";"}


@dataclass
class ExperimentConfig:
    dataset: Optional[str] = None
    separator: str = "\t"
    columns: tuple[str, ...] = ("user", "item", "rating", "timestamp")
    skip_header: int = 0
    min_interactions: int = 5
    eval_negatives: int = 100
    split_seed: int = 0
    model: str = "gmf"
    latent_dim: int = 12
    hidden_layers: tuple[int, ...] = (48, 24, 12, 6)
    strategy: str = "mffedavg"
    clients: int = 20
    batch_size: int = 256
    local_epochs: int = 2
    learning_rate: float = 1e-3
    negatives: int = 4
    rounds: int = 400
    eval_every: int = 5
    seed: int = 0
    workers: int = 1
    scale_bits: int = 16
    centralized: bool = False
    out: str = "runs/latest"
    dump_reindex: bool = False
    num_items: Optional[int] = None
    cost_clients: tuple[int, ...] = tuple(range(10, 101, 10))

    def model_config(self, num_items: int) -> ModelConfig:
        hidden = None if self.model == "gmf" else self.hidden_layers
        return ModelConfig(self.model, self.latent_dim, hidden, num_items)

    def training_plan(self) -> TrainingPlan:
        return TrainingPlan(
            batch_size=self.batch_size,
            local_epochs=self.local_epochs,
            learning_rate=self.learning_rate,
            negatives_per_positive=self.negatives,
            clients_per_round=self.clients,
            aggregation=self.strategy,
            total_global_rounds=self.rounds,
            master_seed=self.seed,
            scale_bits=self.scale_bits,
            workers=self.workers,
        )

    def schema(self) -> Schema:
        return Schema(separator=self.separator, columns=self.columns, skip_header=self.skip_header)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}


_FIELDS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _parse_int_list(text: str) -> tuple[int, ...]:
    text = text.strip()
    if ":" in text:
        # start:stop[:step], stop inclusive
        parts = [int(p) for p in text.split(":")]
        if len(parts) not in (2, 3):
            raise ValueError(f"bad range {text!r}")
        step = parts[2] if len(parts) == 3 else 1
        return tuple(range(parts[0], parts[1] + 1, step))
    return tuple(int(p) for p in text.replace(" ", "").split(",") if p)


def _convert(key: str, value):
    """Convert a raw (usually string) value to the type of config field ``key``."""
    if key not in _FIELDS:
        raise ConfigError(f"{key}: unknown configuration key")
    default = _FIELDS[key].default
    if not isinstance(value, str):
        return tuple(value) if isinstance(default, tuple) else value
    try:
        if key == "separator":
            return _SEPARATORS.get(value.lower(), value.encode().decode("unicode_escape"))
        if key == "columns":
            return tuple(c.strip() for c in value.split(",") if c.strip())
        if key in ("hidden_layers", "cost_clients"):
            return _parse_int_list(value)
        if key in ("dataset", "num_items") and value.strip().lower() in ("", "none"):
            return None
        if key == "num_items":
            return int(value)
        if isinstance(default, bool):
            return _parse_bool(value)
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
        return value.strip()
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from None


def read_config_file(path) -> dict[str, str]:
    values = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in _FIELDS:
                raise ConfigError(f"{key}: unknown configuration key ({path}:{lineno})")
            values[key] = value
    return values


def validate_config(cfg: ExperimentConfig, need_dataset: bool = True) -> ExperimentConfig:
    def bad(key, why):
        raise ConfigError(f"{key}: {why}")

    if need_dataset and not cfg.dataset:
        bad("dataset", "a dataset path is required")
    cfg.model = cfg.model.lower()
    if cfg.model not in ("gmf", "mlp", "neumf"):
        bad("model", f"expected gmf, mlp or neumf, got {cfg.model!r}")
    try:
        cfg.strategy = Strategy.parse(cfg.strategy).value
    except ValueError as exc:
        bad("strategy", str(exc))
    for key in ("latent_dim", "clients", "batch_size", "negatives", "eval_every", "workers", "scale_bits",
                "eval_negatives", "min_interactions"):
        if getattr(cfg, key) < 1:
            bad(key, "must be a positive integer")
    for key in ("local_epochs", "rounds", "skip_header"):
        if getattr(cfg, key) < 0:
            bad(key, "must be non-negative")
    if not cfg.learning_rate > 0:
        bad("learning_rate", "must be positive")
    if cfg.model != "gmf" and (not cfg.hidden_layers or min(cfg.hidden_layers) < 1):
        bad("hidden_layers", "needs at least one positive layer width")
    if cfg.num_items is not None and cfg.num_items < 1:
        bad("num_items", "must be positive")
    if not cfg.cost_clients or min(cfg.cost_clients) < 1:
        bad("cost_clients", "participant counts must be positive")
    try:
        cfg.schema()
    except ValueError as exc:
        bad("columns", str(exc))
    return cfg


def parse_config(path=None, overrides: Optional[dict] = None, need_dataset: bool = True) -> ExperimentConfig:
    """Build a validated config from an optional file plus overrides (overrides win)."""
    values = read_config_file(path) if path else {}
    values.update(overrides or {})
    kwargs = {key: _convert(key, value) for key, value in values.items()}
    return validate_config(ExperimentConfig(**kwargs), need_dataset)


def load_dataset(cfg: ExperimentConfig) -> InteractionDataset:
    raw = load_interactions(cfg.dataset, cfg.schema())
    return binarize_and_filter(raw, cfg.min_interactions)


def write_metrics(path, records: Iterable[RoundRecord]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRICS_COLUMNS)
        for r in records:
            writer.writerow(
                [r.global_round, r.aggregation_rounds, r.strategy, repr(r.hr), repr(r.ndcg),
                 r.transmitted_params, r.transmitted_bytes, r.mask_params]
            )


def write_timings(path, records: Iterable[RoundRecord]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TIMING_COLUMNS)
        for r in records:
            for t in r.timings:
                writer.writerow([t.global_round, t.aggregation_round, t.client_id,
                                 f"{t.local_seconds:.6f}", f"{t.mask_seconds:.6f}"])


def read_metrics(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        for key in ("global_round", "aggregation_rounds", "transmitted_params", "transmitted_bytes", "mask_params"):
            row[key] = int(row[key])
        row["hr"], row["ndcg"] = float(row["hr"]), float(row["ndcg"])
    return rows


def run_experiment(cfg: ExperimentConfig) -> dict:
    """Train, evaluate and write outputs; returns the summary that was written."""
    start = time.perf_counter()
    data = load_dataset(cfg)
    split = leave_one_out_split(data, cfg.eval_negatives, np.random.default_rng(cfg.split_seed))
    model_cfg = cfg.model_config(data.num_items)
    log.info("dataset: %d users, %d items, %d interactions", data.num_users, data.num_items, len(data))

    if cfg.centralized:
        records = train_centralized(
            split, model_cfg, epochs=cfg.rounds, batch_size=cfg.batch_size, learning_rate=cfg.learning_rate,
            negatives_per_positive=cfg.negatives, seed=cfg.seed, eval_every=cfg.eval_every,
        )
    else:
        plan = cfg.training_plan()
        if plan.clients_per_round > data.num_users:
            raise ConfigError(f"clients: {plan.clients_per_round} exceeds the {data.num_users} users")
        records = train_federated(split, model_cfg, plan, eval_every=cfg.eval_every)

    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    write_metrics(out / "metrics.csv", records)
    write_timings(out / "timings.csv", records)
    if cfg.dump_reindex:
        data.dump_reindex(out)

    best = max(records, key=lambda r: (r.hr, -r.global_round))
    point = lambda r: {"global_round": r.global_round, "hr": r.hr, "ndcg": r.ndcg}
    summary = {
        "final": point(records[-1]),
        "best": point(best),
        "dataset": {"users": data.num_users, "items": data.num_items, "interactions": len(data)},
        "transmitted_params": sum(r.transmitted_params for r in records),
        "config": cfg.to_dict(),
        "runtime_seconds": time.perf_counter() - start,
    }
    with open(out / "summary.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2)
        fh.write("\n")
    return summary


def report_costs(cfg: ExperimentConfig, c_range: Sequence[int], num_items: int) -> list[dict]:
    """Per-client generated (mask) and transmitted parameter counts for every model kind."""
    rows = []
    for kind in ("gmf", "mlp", "neumf"):
        model_cfg = dataclasses.replace(cfg, model=kind).model_config(num_items)
        sent = transmitted_per_client(model_cfg, Strategy.MF_SEC_AVG)
        for c in c_range:
            generated = count_masked_parameters(model_cfg, c)
            rows.append(
                {
                    "model": kind,
                    "clients": c,
                    "generated_params": generated,
                    "generated_bytes": generated * BYTES_PER_PARAM,
                    "transmitted_params": sent,
                    "transmitted_bytes": sent * BYTES_PER_PARAM,
                }
            )
    return rows


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedncf", description="Federated NCF experiments (MovieLens-style data).")
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--dataset", help="interaction file")
    p.add_argument("--model", choices=["gmf", "mlp", "neumf"])
    p.add_argument("--strategy", help="simple | fedavg | mffedavg | mfsecavg")
    p.add_argument("--clients", type=int, help="clients per aggregation round")
    p.add_argument("--rounds", type=int, help="global rounds (epochs with --centralized)")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--out", help="output directory")
    p.add_argument("--latent-dim", dest="latent_dim", type=int)
    p.add_argument("--eval-every", dest="eval_every", type=int)
    p.add_argument("--workers", type=int, help="threads for local updates")
    p.add_argument("--centralized", action="store_true", default=None, help="train the centralized baseline")
    p.add_argument("--cost-report", action="store_true", help="print masking cost table and exit")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
    p.add_argument("--log-level", default="INFO")
    return p


def _overrides(args) -> dict:
    values = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        values[key.strip()] = value.strip()
    for key in ("dataset", "model", "strategy", "clients", "rounds", "seed", "out", "latent_dim",
                "eval_every", "workers", "centralized"):
        value = getattr(args, key)
        if value is not None:
            values[key] = value
    return values


def _print_costs(rows: list[dict], stream) -> None:
    writer = csv.DictWriter(stream, COST_COLUMNS, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(asctime)s %(levelname)s %(message)s")
    try:
        cfg = parse_config(args.config, _overrides(args), need_dataset=not args.cost_report)
        if args.cost_report:
            num_items = cfg.num_items
            if num_items is None:
                if not cfg.dataset:
                    raise ConfigError("num_items: give num_items or a dataset for the cost report")
                num_items = load_dataset(cfg).num_items
            _print_costs(report_costs(cfg, cfg.cost_clients, num_items), sys.stdout)
            return 0
        summary = run_experiment(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except (FedNCFError, ValueError, FloatingPointError, ArithmeticError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 3
    final = summary["final"]
    print(f"final HR@10={final['hr']:.4f} NDCG@10={final['ndcg']:.4f} -> {cfg.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
