"""Sweep runner: methods x strengths x utilizations x seeds, with CSV/JSON outputs.

Layout of an output directory::

    config.json                       resolved configuration
    summary.json / summary.csv        mean and std per (strength, utilization, method)
    runs/s<strength>_u<util>/run<i>/plan.json
    runs/s<strength>_u<util>/<method>/run<i>/rounds.csv | run.json | final.params
    plots/                            written by emit_plot_data
"""

from __future__ import annotations

import csv
import io
import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import jsonschema
import numpy as np

from . import model as mil
from .datasets import SyntheticSpec, generate_synthetic, load_bags, load_mnist, split_dataset
from .errors import ConfigError, FedMILError, MissingRunsError
from .federation import FederationConfig, derive_rng, run_federation
from .metrics import aggregate_runs, evaluate
from .partition import (
    DirichletConfig,
    PowerLawConfig,
    UtilizationConfig,
    apply_utilization,
    kmeans_clusters,
    partition_type1,
    partition_type2,
)
from .selection import METHODS, build_kernel, profile_clients, quality_matrix, similarity_matrix

log = logging.getLogger(__name__)

ROUND_COLUMNS = ("round", "method", "loss", "acc", "f1", "auc")


@dataclass
class ExperimentConfig:
    dataset: str = "synthetic"
    dataset_path: str | None = None
    test_path: str | None = None
    mnist_train_limit: int | None = 10000
    mnist_test_limit: int | None = None
    synthetic_num_bags: int = 4500
    synthetic_instances: int = 50
    synthetic_feature_dim: int = 64
    synthetic_latent_clusters: int = 10
    synthetic_class_separation: float = 3.0
    synthetic_class_weights: list | None = field(default_factory=lambda: [2.0, 1.0])
    test_fraction: float = 0.2
    partition: str = "type2"
    strengths: list = field(default_factory=lambda: [0.5])
    utilizations: list = field(default_factory=lambda: [1.0])
    num_clusters: int = 10
    holdout_fraction: float = 0.1
    h_shift: float = 1.0
    v_scale: float | None = None
    n_clients: int = 100
    cohort_size: int = 10
    rounds: int = 50
    local_epochs: int = 1
    learning_rate: float = 0.01
    lookahead_steps: int = 5
    lookahead_alpha: float = 0.5
    embed_dim: int = 128
    attention_dim: int = 64
    epsilon: float = 0.01
    methods: list = field(default_factory=lambda: list(METHODS))
    n_runs: int = 1
    base_seed: int = 0
    reselect_per_round: bool = False
    eval_every: int = 1
    workers: int = 1
    write_checkpoints: bool = True
    output_dir: str = "results"

    @classmethod
    def from_dict(cls, doc):
        _check_schema(doc)
        cfg = cls(**doc)
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def resolved(self):
        return asdict(self)

    def validate(self):
        _check_schema(self.resolved())
        if self.dataset in ("mnist", "fbag") and not self.dataset_path:
            raise ConfigError(f"dataset {self.dataset!r} needs dataset_path")
        if self.partition == "type1" and self.dataset == "mnist":
            raise ConfigError("type1 partitioning needs binary labels; MNIST has 10 classes")
        if any(s <= 0 for s in self.strengths):
            raise ConfigError("strengths must be > 0")
        if any(not 0 < u <= 1 for u in self.utilizations):
            raise ConfigError("utilizations must lie in (0, 1]")
        if not 1 <= self.cohort_size <= self.n_clients:
            raise ConfigError("cohort_size must lie in [1, n_clients]")
        mil.LookaheadConfig(self.learning_rate, self.lookahead_steps, self.lookahead_alpha)


_INT = {"type": "integer"}
_NUM = {"type": "number"}
_OPT_INT = {"type": ["integer", "null"]}
CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "dataset": {"enum": ["synthetic", "mnist", "fbag"]},
        "dataset_path": {"type": ["string", "null"]},
        "test_path": {"type": ["string", "null"]},
        "mnist_train_limit": _OPT_INT,
        "mnist_test_limit": _OPT_INT,
        "synthetic_num_bags": {"type": "integer", "minimum": 1},
        "synthetic_instances": {"type": "integer", "minimum": 1},
        "synthetic_feature_dim": {"type": "integer", "minimum": 1},
        "synthetic_latent_clusters": {"type": "integer", "minimum": 1},
        "synthetic_class_separation": {"type": "number", "exclusiveMinimum": 0},
        "synthetic_class_weights": {"type": ["array", "null"], "items": _NUM},
        "test_fraction": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "partition": {"enum": ["type1", "type2"]},
        "strengths": {"type": "array", "items": _NUM, "minItems": 1},
        "utilizations": {"type": "array", "items": _NUM, "minItems": 1},
        "num_clusters": {"type": "integer", "minimum": 2},
        "holdout_fraction": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "h_shift": {"type": "number", "minimum": 0},
        "v_scale": {"type": ["number", "null"]},
        "n_clients": {"type": "integer", "minimum": 1},
        "cohort_size": {"type": "integer", "minimum": 1},
        "rounds": {"type": "integer", "minimum": 1},
        "local_epochs": {"type": "integer", "minimum": 1},
        "learning_rate": {"type": "number", "minimum": 0},
        "lookahead_steps": {"type": "integer", "minimum": 1},
        "lookahead_alpha": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "embed_dim": {"type": "integer", "minimum": 1},
        "attention_dim": {"type": "integer", "minimum": 1},
        "epsilon": {"type": "number", "minimum": 0, "maximum": 1},
        "methods": {"type": "array", "items": {"enum": list(METHODS)}, "minItems": 1,
                    "uniqueItems": True},
        "n_runs": {"type": "integer", "minimum": 1},
        "base_seed": _INT,
        "reselect_per_round": {"type": "boolean"},
        "eval_every": {"type": "integer", "minimum": 1},
        "workers": {"type": "integer", "minimum": 1},
        "write_checkpoints": {"type": "boolean"},
        "output_dir": {"type": "string"},
    },
}


def _check_schema(doc):
    try:
        jsonschema.validate(doc, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(map(str, exc.absolute_path)) or "<root>"
        raise ConfigError(f"invalid config at {where}: {exc.message}") from None


assert set(CONFIG_SCHEMA["properties"]) == {f.name for f in fields(ExperimentConfig)}


# --- data preparation ------------------------------------------------------------

def load_data(cfg: ExperimentConfig, run_seed: int):
    """Return ``(train, test, latent)`` for one run."""
    if cfg.dataset == "mnist":
        train = load_mnist(cfg.dataset_path, "train", limit=cfg.mnist_train_limit)
        test = load_mnist(cfg.dataset_path, "test", limit=cfg.mnist_test_limit)
        return train, test
    if cfg.dataset == "fbag":
        full = load_bags(cfg.dataset_path)
        if cfg.test_path:
            return full, load_bags(cfg.test_path)
        return split_dataset(full, cfg.test_fraction, int(derive_rng(run_seed, "split").integers(2**31)))
    weights = None if cfg.synthetic_class_weights is None else tuple(cfg.synthetic_class_weights)
    spec = SyntheticSpec(
        num_bags=cfg.synthetic_num_bags, instances_per_bag=cfg.synthetic_instances,
        feature_dim=cfg.synthetic_feature_dim, num_classes=2 if weights is None else len(weights),
        num_latent_clusters=cfg.synthetic_latent_clusters,
        class_separation=cfg.synthetic_class_separation,
        rng_seed=int(derive_rng(run_seed, "data").integers(2**31)), class_weights=weights)
    full = generate_synthetic(spec)
    return split_dataset(full, cfg.test_fraction, int(derive_rng(run_seed, "split").integers(2**31)))


def _seed(run_seed, tag):
    return int(derive_rng(run_seed, tag).integers(2**31))


def make_plan(cfg: ExperimentConfig, train, strength, utilization, run_seed, clusters=None):
    if cfg.partition == "type1":
        plan = partition_type1(train, cfg.n_clients, PowerLawConfig(
            beta=strength, v_scale=cfg.v_scale, h_shift=cfg.h_shift,
            holdout_fraction=cfg.holdout_fraction, rng_seed=_seed(run_seed, "partition")))
    else:
        if clusters is None:
            clusters, _ = kmeans_clusters(train, cfg.num_clusters, _seed(run_seed, "kmeans"))
        plan = partition_type2(train, cfg.n_clients, DirichletConfig(
            alpha=strength, num_clusters=cfg.num_clusters, rng_seed=_seed(run_seed, "partition")),
            clusters)
    return apply_utilization(plan, UtilizationConfig(utilization, _seed(run_seed, "utilization")))


def federation_config(cfg: ExperimentConfig, method, run_seed):
    return FederationConfig(
        n_clients=cfg.n_clients, cohort_size=cfg.cohort_size, rounds=cfg.rounds,
        local_epochs=cfg.local_epochs, method=method, reselect_per_round=cfg.reselect_per_round,
        optimizer=mil.LookaheadConfig(cfg.learning_rate, cfg.lookahead_steps, cfg.lookahead_alpha),
        eval_every=cfg.eval_every, seed=run_seed, epsilon=cfg.epsilon, embed_dim=cfg.embed_dim,
        attention_dim=cfg.attention_dim, workers=cfg.workers)


# --- output helpers ----------------------------------------------------------------

def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _write_text(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def _write_json(path: Path, doc):
    _write_text(path, json.dumps(doc, indent=1, sort_keys=True) + "\n")


def _csv_text(header, rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def group_name(strength, utilization):
    return f"s{strength:g}_u{utilization:g}"


def run_dir(out, strength, utilization, method, run):
    return Path(out) / "runs" / group_name(strength, utilization) / method / f"run{run:02d}"


# --- experiment ------------------------------------------------------------------

def run_single(cfg, train, test, plan, method, run_seed):
    """One federated run; returns ``(FederationResult, final EvalResult)``."""
    result = run_federation(train, plan, federation_config(cfg, method, run_seed), test)
    return result, evaluate(result.params, test)


def run_experiment(cfg: ExperimentConfig) -> dict:
    """Execute the sweep and write all outputs. Returns the summary document."""
    cfg.validate()
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", cfg.resolved())

    finals = {}  # (strength, util, method) -> list of per-run final metrics
    status, error = "complete", None
    try:
        for i in range(cfg.n_runs):
            run_seed = cfg.base_seed + i
            train, test = load_data(cfg, run_seed)
            clusters = None
            if cfg.partition == "type2":
                clusters, _ = kmeans_clusters(train, cfg.num_clusters, _seed(run_seed, "kmeans"))
            for strength in cfg.strengths:
                for util in cfg.utilizations:
                    plan = make_plan(cfg, train, strength, util, run_seed, clusters)
                    _write_text(out / "runs" / group_name(strength, util) / f"run{i:02d}" /
                                "plan.json", plan.to_json(train) + "\n")
                    for method in cfg.methods:
                        result, final = run_single(cfg, train, test, plan, method, run_seed)
                        _write_run(cfg, out, strength, util, method, i, run_seed, result, final)
                        finals.setdefault((strength, util, method), []).append(
                            {"accuracy": final.accuracy, "f1": final.f1, "auc": final.auc,
                             "loss": result.records[-1].global_loss})
                        log.info("run %d s=%g u=%g %s acc=%.4f", i, strength, util, method,
                                 final.accuracy)
    except FedMILError as exc:
        status, error = "incomplete", f"{type(exc).__name__}: {exc}"
        log.error("experiment aborted: %s", error)

    summary = _summarize(cfg, finals, status, error)
    _write_json(out / "summary.json", summary)
    _write_text(out / "summary.csv", _summary_table(cfg, summary))
    return summary


def _write_run(cfg, out, strength, util, method, run, run_seed, result, final):
    d = run_dir(out, strength, util, method, run)
    rows = [(r.round, method, r.global_loss, r.accuracy, r.f1, r.auc) for r in result.records]
    _write_text(d / "rounds.csv", _csv_text(ROUND_COLUMNS, rows))
    doc = {
        "method": method, "run": run, "seed": run_seed, "strength": strength,
        "utilization": util, "selected": sorted(int(c) for c in result.selection.indices),
        "selection_order": [int(c) for c in result.selection.indices],
        "profiles": [{"client_id": p.client_id, "mean_loss": p.mean_loss,
                      "shard_size": p.shard_size} for p in result.profiles],
        "final": final.as_dict(),
        "final_loss": result.records[-1].global_loss,
        "f1_kind": "binary" if final.confusion.shape[0] == 2 else "macro",
    }
    if result.kernel is not None:
        doc["kernel_eigenvalues"] = result.kernel.eigenvalues.tolist()
    _write_json(d / "run.json", doc)
    if cfg.write_checkpoints:
        d.mkdir(parents=True, exist_ok=True)
        (d / "final.params").write_bytes(result.params.to_bytes())


def _summarize(cfg, finals, status, error):
    cells = []
    for (strength, util, method), runs in sorted(finals.items(), key=lambda kv: (
            kv[0][1], kv[0][0], cfg.methods.index(kv[0][2]))):
        cells.append({"strength": strength, "utilization": util, "method": method,
                      "n_runs": len(runs), "metrics": aggregate_runs(runs)})
    return {"status": status, "error": error, "config": cfg.resolved(), "cells": cells}


def _summary_table(cfg, summary):
    """Rows: utilization x method. Columns: per strength, auc / f1 / acc as mean+-std."""
    lookup = {(c["strength"], c["utilization"], c["method"]): c["metrics"] for c in summary["cells"]}
    header = ["utilization", "method"]
    for s in cfg.strengths:
        header += [f"s={s:g} auc", f"s={s:g} f1", f"s={s:g} acc"]
    rows = []
    for u in sorted(cfg.utilizations):
        for m in cfg.methods:
            row = [f"{u:g}", m]
            for s in cfg.strengths:
                metrics = lookup.get((s, u, m))
                for key in ("auc", "f1", "accuracy"):
                    if metrics is None or metrics[key]["mean"] is None:
                        row.append("")
                    else:
                        row.append(f"{metrics[key]['mean']:.4f}+-{metrics[key]['std']:.4f}")
            rows.append(row)
    return _csv_text(header, rows)


# --- kernel inspection -------------------------------------------------------------

def inspect_kernel(cfg: ExperimentConfig) -> dict:
    """Profiles, S, q and the eigenvalues of L for run 0 at the first strength/utilization."""
    cfg.validate()
    run_seed = cfg.base_seed
    train, _ = load_data(cfg, run_seed)
    plan = make_plan(cfg, train, cfg.strengths[0], cfg.utilizations[0], run_seed)
    fcfg = federation_config(cfg, "dppq", run_seed)
    params = mil.init_params(mil.ModelConfig(
        train.feature_dim, cfg.embed_dim, cfg.attention_dim, train.num_classes,
        init_seed=int(derive_rng(run_seed, "init").integers(2**31))))
    profiles = profile_clients(params, train, plan.shards[: fcfg.n_clients])
    S = similarity_matrix(profiles)
    q = quality_matrix(profiles, cfg.epsilon)
    kernel = build_kernel(S, q, cfg.epsilon)
    return {
        "S": S.tolist(), "q": q.tolist(), "eigenvalues": kernel.eigenvalues.tolist(),
        "mean_losses": [p.mean_loss for p in profiles],
        "shard_sizes": [p.shard_size for p in profiles],
    }


# --- plot data ---------------------------------------------------------------------

def _read_rounds(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _mean(values):
    values = [float(v) for v in values if v != ""]
    return repr(float(np.mean(values))) if values else ""


def emit_plot_data(results_dir) -> list:
    """Write convergence-curve and utilization CSVs under ``results_dir/plots``.

    Returns the written paths. Raises :class:`MissingRunsError` when runs named
    by the stored configuration are absent (or no runs exist at all).
    """
    results = Path(results_dir)
    config_path = results / "config.json"
    if not config_path.is_file():
        raise MissingRunsError(f"{results}: no config.json, zero runs found", missing=[])
    cfg = ExperimentConfig.from_file(config_path)
    expected = [(s, u, m, i) for s in cfg.strengths for u in cfg.utilizations
                for m in cfg.methods for i in range(cfg.n_runs)]
    missing = [run_dir(results, s, u, m, i) for s, u, m, i in expected
               if not (run_dir(results, s, u, m, i) / "rounds.csv").is_file()]
    if missing:
        found = len(expected) - len(missing)
        raise MissingRunsError(
            f"{len(missing)} of {len(expected)} runs missing ({found} found): "
            + ", ".join(str(p.relative_to(results)) for p in missing), missing=missing)

    written = []
    plots = results / "plots"
    util_rows = []
    for s in cfg.strengths:
        for u in cfg.utilizations:
            rows = []
            for m in cfg.methods:
                per_run = [_read_rounds(run_dir(results, s, u, m, i) / "rounds.csv")
                           for i in range(cfg.n_runs)]
                for r in range(cfg.rounds):
                    at = [run[r] for run in per_run]
                    rows.append((r + 1, m, cfg.n_runs, _mean(a["loss"] for a in at),
                                 _mean(a["acc"] for a in at), _mean(a["f1"] for a in at),
                                 _mean(a["auc"] for a in at)))
                finals = [float(run[-1]["acc"]) for run in per_run if run[-1]["acc"] != ""]
                std = float(np.std(finals, ddof=1)) if len(finals) > 1 else 0.0
                util_rows.append((s, u, m, len(finals), repr(float(np.mean(finals))), repr(std)))
            path = plots / f"curve_{group_name(s, u)}.csv"
            _write_text(path, _csv_text(("round", "method", "n_runs", "loss", "acc", "f1", "auc"),
                                        rows))
            written.append(path)
    path = plots / "utilization.csv"
    _write_text(path, _csv_text(("strength", "utilization", "method", "n_runs", "acc_mean",
                                 "acc_std"), util_rows))
    written.append(path)
    return written
