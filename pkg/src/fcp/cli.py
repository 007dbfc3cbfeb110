"""Command-line front end.

Usage::

    fcp simulate --config run.json --trials 5 --out results/
    fcp sketch-compare --out results/
    fcp dp --set privacies=0.1,1,10 --out results/
    fcp heterogeneity --set levels=2,3,4,10 --out results/

Configuration comes from built-in defaults, then ``--config`` (JSON or
``key = value`` lines), then command-line flags. Data goes to files in
``--out``; diagnostics go to stderr.

Exit codes: 0 success, 2 configuration error, 3 data or ingestion error,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import math
import os
import sys
import warnings
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import __version__, metrics
from .errors import FCPError, FormatError, InvalidInputError, ParseError, TrainingError
from .federation import FederationPlan, QuantileRule, calibrate, sample_test_mixture
from .model import load_score_file
from .quantile import MixtureWeights
from .scores import ScoreFunctionSpec
from .simulation import (
    SyntheticConfig,
    SyntheticFederation,
    derive_seed,
    dp_sweep,
    heterogeneity_sweep,
    make_class_sets,
    run_trial,
    sketch_comparison,
)
from .sketch import SketchKind

log = logging.getLogger("fcp")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class ConfigError(FCPError):
    def __init__(self, path, message):
        super().__init__(f"{path}: {message}")
        self.path = path


def _floats(text):
    if isinstance(text, (list, tuple)):
        return tuple(float(x) for x in text)
    return tuple(float(x) for x in str(text).split(",") if x.strip())


def _ints(text):
    if isinstance(text, (list, tuple)):
        return tuple(int(x) for x in text)
    return tuple(int(x) for x in str(text).split(",") if x.strip())


def _strs(text):
    if isinstance(text, (list, tuple)):
        return tuple(str(x) for x in text)
    return tuple(x.strip() for x in str(text).split(",") if x.strip())


def _bool(text):
    if isinstance(text, bool):
        return text
    v = str(text).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


@dataclass
class RunConfig:
    clients: int = 2
    classes: int = 10
    classes_per_client: int = 0  # 0: classes // clients
    calibration_size: tuple = (100,)
    alpha: float = 0.1
    score: str = "lac"
    rule: str = "federated"
    sketch: str = "exact"
    seed: int = 0
    trials: int = 5
    out: str = "results"
    temperature_scaling: bool = True
    source: str = "synthetic"
    score_format: str = ""
    dim: int = 2
    separation: float = 3.0
    noise_sigma: float = 1.0
    n_train: int = 200
    rounds: int = 100
    local_steps: int = 5
    lr: float = 0.1
    test_pool: int = 200
    test_draws: int = 2000
    alphas: tuple = tuple(round(0.05 * i, 2) for i in range(1, 11))
    methods: tuple = ("exact", "tdigest:100", "ddsketch:0.01", "mean")
    privacies: tuple = (0.1, 1.0, 10.0, 1e6)
    levels: tuple = (2, 3, 4, 10)
    records: bool = False

    _PARSERS = {
        "calibration_size": _ints,
        "alphas": _floats,
        "methods": _strs,
        "privacies": _floats,
        "levels": _ints,
        "temperature_scaling": _bool,
        "records": _bool,
    }

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]

    def update(self, values: dict, origin: str):
        types = {f.name: f.type for f in fields(self)}
        for key, raw in values.items():
            name = key.strip().replace("-", "_")
            if name not in types:
                raise ConfigError(f"{origin}.{key}", "unknown configuration key")
            parse = self._PARSERS.get(name) or {"int": int, "float": float, "str": str}[types[name]]
            try:
                value = parse(raw)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{origin}.{name}", str(exc)) from None
            setattr(self, name, value)
        return self

    def echo(self) -> dict:
        """Settings that determine results; the output location is excluded."""
        return {
            k: (list(v) if isinstance(v, tuple) else v)
            for k, v in dataclasses.asdict(self).items()
            if k not in ("out", "records")
        }

    # Validation with field paths; returns the derived objects.
    def validate(self):
        def need(ok, name, message):
            if not ok:
                raise ConfigError(f"config.{name}", message)

        need(self.clients >= 1, "clients", "must be >= 1")
        need(0.0 < self.alpha < 1.0, "alpha", "must lie in (0, 1)")
        need(self.trials >= 1, "trials", "must be >= 1")
        need(all(n >= 1 for n in self.calibration_size) and self.calibration_size, "calibration_size",
             "every size must be >= 1")
        need(len(self.calibration_size) in (1, self.clients), "calibration_size",
             "give one size or one per client")
        need(self.classes >= 2, "classes", "must be >= 2")
        need(self.dim >= 2, "dim", "must be >= 2")
        need(self.noise_sigma >= 0, "noise_sigma", "must be non-negative")
        need(self.test_draws >= 1 and self.test_pool >= 1, "test_draws", "must be >= 1")
        need(all(0 < a < 1 for a in self.alphas), "alphas", "every alpha must lie in (0, 1)")
        need(all(p > 0 for p in self.privacies), "privacies", "must be positive")
        cpc = self.classes_per_client or max(1, self.classes // self.clients)
        need(1 <= cpc <= self.classes, "classes_per_client", "must lie in [1, classes]")
        parsed = {}
        for name, parse in (("score", ScoreFunctionSpec.parse), ("rule", QuantileRule.parse),
                            ("sketch", SketchKind.parse)):
            try:
                parsed[name] = parse(getattr(self, name))
            except (InvalidInputError, ValueError) as exc:
                raise ConfigError(f"config.{name}", str(exc)) from None
        for m in self.methods:
            try:
                SketchKind.parse(m)
            except (InvalidInputError, ValueError) as exc:
                raise ConfigError("config.methods", str(exc)) from None
        rule = parsed["rule"]
        if rule.client is not None and rule.client >= self.clients and self.source == "synthetic":
            raise ConfigError("config.rule", f"client index {rule.client} out of range")
        if self.source != "synthetic":
            need(Path(self.source).exists(), "source", f"score file {self.source} does not exist")
        return parsed, cpc

    def sizes(self):
        if len(self.calibration_size) == 1:
            return tuple(self.calibration_size) * self.clients
        return tuple(self.calibration_size)

    def synthetic(self) -> SyntheticConfig:
        return SyntheticConfig(
            n_classes=self.classes, dim=self.dim, separation=self.separation, noise_sigma=self.noise_sigma,
            n_train=self.n_train, rounds=self.rounds, local_steps=self.local_steps, lr=self.lr,
        )


def read_config_file(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(str(path), f"cannot read: {exc.strerror}") from None
    stripped = text.lstrip()
    if stripped.startswith("{"):
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}:{exc.lineno}", f"invalid JSON: {exc.msg}") from None
        if not isinstance(data, dict):
            raise ConfigError(str(path), "top level must be an object")
        return data
    data = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}", "expected key = value")
        key, value = line.split("=", 1)
        data[key.strip()] = value.strip()
    return data


# Per-command defaults, applied before the config file and flags.
COMMAND_DEFAULTS = {
    "simulate": {},
    "sketch-compare": {"clients": 5, "calibration_size": 200, "test_draws": 4000},
    "dp": {"clients": 5},
    "heterogeneity": {"clients": 5},
}


def build_config(args) -> RunConfig:
    cfg = RunConfig().update(COMMAND_DEFAULTS.get(args.command, {}), "defaults")
    env_seed = os.environ.get("FCP_SEED")
    if env_seed:
        cfg.update({"seed": env_seed}, "env.FCP_SEED")
    if args.config:
        cfg.update(read_config_file(args.config), "config")
    overrides = {}
    for name in ("alpha", "clients", "sketch", "rule", "seed", "trials", "out"):
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = value
    cfg.update(overrides, "flag")
    sets = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"flag.set[{item}]", "expected key=value")
        key, value = item.split("=", 1)
        sets[key] = value
    cfg.update(sets, "flag.set")
    return cfg


def _run_id(cfg: RunConfig, command: str) -> str:
    canonical = json.dumps({"command": command, "config": cfg.echo()}, sort_keys=True)
    return hashlib.sha256(canonical.encode()).hexdigest()[:16]


def _json_default(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def _clean(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None if math.isnan(obj) else ("inf" if obj > 0 else "-inf")
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    return obj


def write_json(path, payload):
    text = json.dumps(_clean(payload), sort_keys=True, indent=2, default=_json_default)
    Path(path).write_text(text + "\n", encoding="utf-8")


def write_csv(path, rows, columns):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore", lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: ("" if row.get(k) is None else row.get(k)) for k in columns})


def _envelope(cfg, command):
    return {"run_id": _run_id(cfg, command), "command": command, "plan": cfg.echo(),
            "seed": cfg.seed, "version": __version__}


def _score_file_trials(cfg, parsed):
    data = load_score_file(cfg.source, cfg.score_format or None)
    log.info("loaded %s: %s", cfg.source, ", ".join(f"{k}={v}" for k, v in data.row_counts.items()))
    for t in range(cfg.trials):
        clients = [c.split(derive_seed(cfg.seed, 7, t, k)) for k, c in enumerate(data.clients)]
        for c in clients:
            if len(c.calibration) == 0 or len(c.test) == 0:
                raise InvalidInputError(f"client {c.client_id} has too few rows to split")
        plan = FederationPlan(
            [c.classes for c in clients], [len(c.calibration) for c in clients], cfg.alpha,
            score_spec=parsed["score"], rule=parsed["rule"], sketch_kind=parsed["sketch"],
            seed=derive_seed(cfg.seed, t), temperature_scaling=cfg.temperature_scaling,
        )
        predictor = calibrate(plan, clients, data.model)
        sample = sample_test_mixture(clients, MixtureWeights.proportional(plan.calibration_sizes),
                                     cfg.test_draws, derive_seed(cfg.seed, 4, t))
        records = metrics.evaluate(predictor, data.model, sample, [c.client_id for c in clients])
        summary = metrics.summarize(records, data.model.n_classes)
        summary["per_client_coverage"] = metrics.per_client_coverage(records)
        yield predictor, records, summary


def _synthetic_trials(cfg, parsed, cpc):
    sizes = cfg.sizes()
    class_sets = make_class_sets(cfg.classes, cfg.clients, cpc, cfg.seed)
    fed = SyntheticFederation.build(cfg.synthetic(), class_sets, cfg.seed)
    log.info("trained model: train accuracy %.3f", fed.train_accuracy)
    for t in range(cfg.trials):
        plan = FederationPlan(
            class_sets, sizes, cfg.alpha, score_spec=parsed["score"], rule=parsed["rule"],
            sketch_kind=parsed["sketch"], seed=derive_seed(cfg.seed, t),
            temperature_scaling=cfg.temperature_scaling,
        )
        outcome = run_trial(fed, plan, t, n_test_pool=cfg.test_pool, n_draws=cfg.test_draws)
        yield outcome.predictor, outcome.records, outcome.summary


def cmd_simulate(cfg: RunConfig):
    parsed, cpc = cfg.validate()
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    trials = _synthetic_trials(cfg, parsed, cpc) if cfg.source == "synthetic" else _score_file_trials(cfg, parsed)
    base = _envelope(cfg, "simulate")
    summaries = []
    written = []
    for t, (predictor, records, summary) in enumerate(trials):
        result = dict(base)
        result.update(summary)
        result.update({
            "trial": t,
            "rule": str(predictor.rule),
            "sketch": str(parsed["sketch"]),
            "alpha": cfg.alpha,
            "threshold": predictor.threshold,
            "rank": predictor.rank,
            "temperature": predictor.temperature,
            "vacuous": predictor.vacuous,
            "sketch_bytes_total": predictor.sketch_bytes,
        })
        path = out / f"trial_{t:03d}.json"
        write_json(path, result)
        written.append(path)
        if cfg.records:
            metrics.write_records_csv(out / f"trial_{t:03d}_records.csv", records)
        summaries.append(result)

    covs = np.array([s["coverage"] for s in summaries])
    aggregate = dict(base)
    aggregate.update({
        "rule": str(parsed["rule"]),
        "sketch": str(parsed["sketch"]),
        "alpha": cfg.alpha,
        "trials": len(summaries),
        "coverage": float(covs.mean()),
        "coverage_sd": float(covs.std(ddof=1)) if covs.size > 1 else 0.0,
        "mean_size": float(np.mean([s["mean_size"] for s in summaries])),
        "top1_accuracy": float(np.mean([s["top1_accuracy"] for s in summaries])),
        "vacuous": any(s["vacuous"] for s in summaries),
        "ssc": _average_strata([s["ssc"] for s in summaries]),
        "selective": _average_selective([s["selective"] for s in summaries]),
        "sketch_bytes_total": int(sum(s["sketch_bytes_total"] for s in summaries)),
    })
    path = out / "aggregate.json"
    write_json(path, aggregate)
    written.append(path)
    if aggregate["vacuous"]:
        log.warning("vacuous quantile in at least one trial: alpha=%s is too small for N/K", cfg.alpha)
    log.info("coverage %.4f, mean size %.3f over %d trials", aggregate["coverage"], aggregate["mean_size"],
             aggregate["trials"])
    return written


def _average_strata(per_trial):
    out = []
    for i in range(4):
        rows = [t[i] for t in per_trial if len(t) > i and t[i]["count"]]
        n = sum(r["count"] for r in rows)
        out.append({
            "lo_pct": 25 * i,
            "hi_pct": 25 * (i + 1),
            "count": n,
            "coverage": sum(r["coverage"] * r["count"] for r in rows) / n if n else None,
            "mean_size": sum(r["mean_size"] * r["count"] for r in rows) / n if n else None,
        })
    return out


def _average_selective(per_trial):
    if not per_trial:
        return []
    return [
        {"excluded": row["excluded"], "accuracy": float(np.mean([t[i]["accuracy"] for t in per_trial]))}
        for i, row in enumerate(per_trial[0])
    ]


def cmd_sketch_compare(cfg: RunConfig):
    cfg.validate()
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = sketch_comparison(
        alphas=cfg.alphas, methods=cfg.methods, n_clients=min(cfg.clients, 5),
        n_cal=cfg.sizes()[0], trials=cfg.trials, n_draws=cfg.test_draws, score=cfg.score, seed=cfg.seed,
    )
    write_csv(out / "sketch_compare.csv", rows, ["method", "alpha", "coverage", "mean_size", "se"])
    payload = _envelope(cfg, "sketch-compare")
    payload["rows"] = rows
    write_json(out / "sketch_compare.json", payload)
    return [out / "sketch_compare.csv", out / "sketch_compare.json"]


def _check_pairs(cfg):
    if 2 * cfg.clients > cfg.classes:
        raise ConfigError("config.clients", "sweeps give each client two classes; need 2 * clients <= classes")


def cmd_dp(cfg: RunConfig):
    cfg.validate()
    _check_pairs(cfg)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = dp_sweep(cfg.privacies, alpha=cfg.alpha, n_clients=cfg.clients, n_cal=cfg.sizes()[0],
                    trials=cfg.trials, n_draws=cfg.test_draws, seed=cfg.seed, config=cfg.synthetic())
    write_csv(out / "dp.csv", rows, ["rule", "privacy", "coverage", "coverage_sd", "mean_size", "trials"])
    payload = _envelope(cfg, "dp")
    payload["rows"] = rows
    write_json(out / "dp.json", payload)
    return [out / "dp.csv", out / "dp.json"]


def cmd_heterogeneity_sweep(cfg: RunConfig):
    cfg.validate()
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = heterogeneity_sweep(cfg.levels, alpha=cfg.alpha, n_clients=cfg.clients, n_cal=cfg.sizes()[0],
                               trials=cfg.trials, n_draws=cfg.test_draws, seed=cfg.seed, config=cfg.synthetic())
    cols = ["classes_per_client", "iid", "coverage", "mean_size", "top1_accuracy", "train_accuracy", "se"]
    write_csv(out / "heterogeneity.csv", rows, cols)
    payload = _envelope(cfg, "heterogeneity")
    payload["rows"] = rows
    write_json(out / "heterogeneity.json", payload)
    return [out / "heterogeneity.csv", out / "heterogeneity.json"]


COMMANDS = {
    "simulate": cmd_simulate,
    "sketch-compare": cmd_sketch_compare,
    "dp": cmd_dp,
    "heterogeneity": cmd_heterogeneity_sweep,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="fcp", description="Federated conformal prediction simulator")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON or key=value configuration file")
        p.add_argument("--alpha", type=str)
        p.add_argument("--clients", type=str)
        p.add_argument("--sketch", type=str)
        p.add_argument("--rule", type=str)
        p.add_argument("--seed", type=str)
        p.add_argument("--trials", type=str)
        p.add_argument("--out", type=str)
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help=f"override any key ({', '.join(RunConfig.field_names())})")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def _attach_stderr(verbose):
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    loggers = [logging.getLogger("fcp"), logging.getLogger("py.warnings")]
    for lg in loggers:
        lg.addHandler(handler)
        lg.setLevel(logging.INFO if verbose else logging.WARNING)
        lg.propagate = False
    return handler, loggers


def main(argv=None):
    args = build_parser().parse_args(argv)
    handler, loggers = _attach_stderr(args.verbose)
    logging.captureWarnings(True)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            cfg = build_config(args)
            COMMANDS[args.command](cfg)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except (ParseError, FormatError, InvalidInputError) as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    except (TrainingError, FloatingPointError) as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERIC
    finally:
        logging.captureWarnings(False)
        for lg in loggers:
            lg.removeHandler(handler)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
