"""Experiment configuration, task construction, sweep execution and run-log persistence."""
from __future__ import annotations

import hashlib
import io
import json
import logging
import os
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import yaml
from threadpoolctl import threadpool_limits

from .algorithms import run_algorithm
from .data import Dataset, gen_synthetic_classification, holdout_split, load_idx, partition_noniid
from .exceptions import ConfigError, NumericError
from .nn import LayerSpec
from .quadratic import QuadraticNet, as_params, make_quadratic_data, quadratic_specs
from .schedules import ALGORITHMS, ScheduleParams, TrainConfig

log = logging.getLogger(__name__)

TASKS = ("synthetic_classification", "quadratic", "idx_files")
CSV_COLUMNS = ("i", "t", "e", "m", "loss", "accuracy", "dist_sq_to_wstar", "eta_c", "eta_s",
               "grad_var_at_client_mean", "grad_var_across_clients")
OUTPUT_DIR_ENV = "MBSFL_OUTPUT_DIR"


@dataclass
class SyntheticTask:
    d: int = 20
    classes: int = 10
    per_class: int = 100
    spread: float = 1.0
    scale: float = 1.0
    holdout: float = 0.2


@dataclass
class QuadraticTaskConfig:
    dim: int = 2
    center_spread: float = 0.05
    centers_seed: int = 7
    per_client: int = 2000
    noise_std: float = 1.0
    data_seed: int = 11
    init_offset: float = 0.0


@dataclass
class IdxTask:
    images: str = ""
    labels: str = ""
    test_images: str | None = None
    test_labels: str | None = None
    n_classes: int = 10
    limit: int | None = None


@dataclass
class ModelConfig:
    hidden: list = field(default_factory=lambda: [64, 64])
    activation: str = "relu"


@dataclass
class ExperimentConfig:
    """A sweep over (algorithm, r, L_c, seed) cells sharing one training setup."""

    task: str = "synthetic_classification"
    synthetic: SyntheticTask = field(default_factory=SyntheticTask)
    quadratic: QuadraticTaskConfig = field(default_factory=QuadraticTaskConfig)
    idx: IdxTask = field(default_factory=IdxTask)
    model: ModelConfig = field(default_factory=ModelConfig)
    algorithms: list = field(default_factory=lambda: ["minibatch_sfl"])
    r_values: list = field(default_factory=lambda: [0.0])
    cut_layers: list = field(default_factory=lambda: [1])
    seeds: list = field(default_factory=lambda: [0])
    n_clients: int = 10
    rounds: int = 1
    local_epochs: int = 5
    batches_per_epoch: int = 1
    batch_size: int = 32
    schedule: ScheduleParams = field(default_factory=ScheduleParams)
    weights_mode: str = "by_size"
    log_every_step: bool = False
    variance_window: int | None = None
    sfl_v2_shuffle: bool = False
    output_dir: str | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    def layer_specs(self, n_features: int | None = None, n_classes: int | None = None) -> list:
        if self.task == "quadratic":
            return quadratic_specs(self.quadratic.dim)
        dims = [n_features, *self.model.hidden, n_classes]
        acts = [self.model.activation] * (len(dims) - 2) + ["softmax_xent_head"]
        return [LayerSpec(a, b, act) for a, b, act in zip(dims[:-1], dims[1:], acts)]

    def n_layers(self) -> int:
        return self.quadratic.dim if self.task == "quadratic" else len(self.model.hidden) + 1

    def train_config(self, algorithm: str, r: float, cut_layer: int, seed: int, specs) -> TrainConfig:
        return TrainConfig(
            specs, n_clients=self.n_clients, rounds=self.rounds, local_epochs=self.local_epochs,
            batches_per_epoch=self.batches_per_epoch, batch_size=self.batch_size, cut_layer=cut_layer,
            algorithm=algorithm, schedule=self.schedule, seed=seed, init_seed=seed, r=r,
            weights_mode=self.weights_mode, log_every_step=self.log_every_step,
            variance_window=self.variance_window, sfl_v2_shuffle=self.sfl_v2_shuffle,
        )

    def cells(self) -> list:
        return [(a, float(r), int(lc), int(s)) for a in self.algorithms for r in self.r_values
                for lc in self.cut_layers for s in self.seeds]


# ---------------------------------------------------------------- parsing

def _check_type(value, kind: str, key: str):
    def bad():
        return ConfigError(key, f"expected {kind}, got {value!r}")

    if kind.startswith("opt_"):
        return None if value is None else _check_type(value, kind[4:], key)
    if kind == "bool":
        if not isinstance(value, bool):
            raise bad()
        return value
    if kind == "int":
        if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
            raise bad()
        return int(value)
    if kind == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float, np.integer, np.floating)):
            raise bad()
        return float(value)
    if kind == "str":
        if not isinstance(value, str):
            raise bad()
        return value
    if kind.startswith("list_"):
        if not isinstance(value, (list, tuple)):
            raise bad()
        return [_check_type(v, kind[5:], f"{key}[{j}]") for j, v in enumerate(value)]
    raise AssertionError(kind)


_KINDS = {
    SyntheticTask: {"d": "int", "classes": "int", "per_class": "int", "spread": "float", "scale": "float",
                    "holdout": "float"},
    QuadraticTaskConfig: {"dim": "int", "center_spread": "float", "centers_seed": "int", "per_client": "int",
                          "noise_std": "float", "data_seed": "int", "init_offset": "float"},
    IdxTask: {"images": "str", "labels": "str", "test_images": "opt_str", "test_labels": "opt_str",
              "n_classes": "int", "limit": "opt_int"},
    ModelConfig: {"hidden": "list_int", "activation": "str"},
    ScheduleParams: {"mode": "str", "constant_lr": "float", "mu": "float", "S": "float"},
    ExperimentConfig: {"task": "str", "algorithms": "list_str", "r_values": "list_float", "cut_layers": "list_int",
                       "seeds": "list_int", "n_clients": "int", "rounds": "int", "local_epochs": "int",
                       "batches_per_epoch": "int", "batch_size": "int", "weights_mode": "str",
                       "log_every_step": "bool", "variance_window": "opt_int", "sfl_v2_shuffle": "bool",
                       "output_dir": "opt_str"},
}
_SECTIONS = {"synthetic": SyntheticTask, "quadratic": QuadraticTaskConfig, "idx": IdxTask, "model": ModelConfig,
             "schedule": ScheduleParams}


def _build(cls, raw, prefix: str):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(prefix.rstrip(".") or "<root>", f"expected a mapping, got {raw!r}")
    known = {f.name for f in fields(cls)}
    for key in raw:
        if key not in known:
            raise ConfigError(f"{prefix}{key}", "unknown key")
    values = {}
    for key, value in raw.items():
        if cls is ExperimentConfig and key in _SECTIONS:
            values[key] = _build(_SECTIONS[key], value, f"{key}.")
        else:
            values[key] = _check_type(value, _KINDS[cls][key], f"{prefix}{key}")
    return cls(**values)


def _dedupe_seeds(seeds: list) -> list:
    out = list(dict.fromkeys(seeds))
    if len(out) != len(seeds):
        log.warning("duplicate seeds removed: %s -> %s", seeds, out)
    return out


def validate(cfg: ExperimentConfig) -> ExperimentConfig:
    if cfg.task not in TASKS:
        raise ConfigError("task", f"unknown task {cfg.task!r}; choose from {', '.join(TASKS)}")
    for key in ("algorithms", "r_values", "cut_layers", "seeds"):
        if not getattr(cfg, key):
            raise ConfigError(key, "must not be empty")
    for j, a in enumerate(cfg.algorithms):
        if a not in ALGORITHMS:
            raise ConfigError(f"algorithms[{j}]", f"unknown algorithm {a!r}")
    for j, r in enumerate(cfg.r_values):
        if not 0.0 <= r <= 1.0:
            raise ConfigError(f"r_values[{j}]", f"{r} outside [0, 1]")
    L = cfg.n_layers()
    for j, lc in enumerate(cfg.cut_layers):
        if not 0 <= lc <= L:
            raise ConfigError(f"cut_layers[{j}]", f"L_c={lc} outside [0, {L}]")
    for key in ("n_clients", "rounds", "local_epochs", "batches_per_epoch", "batch_size"):
        if getattr(cfg, key) < 1:
            raise ConfigError(key, "must be at least 1")
    if cfg.weights_mode not in ("uniform", "by_size"):
        raise ConfigError("weights_mode", f"unknown mode {cfg.weights_mode!r}")
    if cfg.task == "synthetic_classification" and not 0.0 <= cfg.synthetic.holdout < 1.0:
        raise ConfigError("synthetic.holdout", "must lie in [0, 1)")
    if cfg.task == "idx_files" and not (cfg.idx.images and cfg.idx.labels):
        raise ConfigError("idx.images", "idx_files task needs images and labels paths")
    if cfg.task == "quadratic" and cfg.quadratic.dim < 1:
        raise ConfigError("quadratic.dim", "must be at least 1")
    if any(not h >= 1 for h in cfg.model.hidden):
        raise ConfigError("model.hidden", "layer widths must be positive")
    cfg.seeds = _dedupe_seeds(cfg.seeds)
    return cfg


def apply_overrides(raw: dict, overrides) -> dict:
    """Apply ``key.path=value`` overrides; values are parsed as YAML scalars or lists."""
    raw = json.loads(json.dumps(raw or {}))
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(item, "override must look like key=value")
        path, text = item.split("=", 1)
        keys = path.strip().split(".")
        node = raw
        for k in keys[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise ConfigError(path, f"{k} is not a section")
        node[keys[-1]] = yaml.safe_load(text)
    return raw


def parse_config(path=None, overrides=None) -> ExperimentConfig:
    """Load a YAML config (optional), apply overrides, fill defaults and validate."""
    raw = {}
    if path is not None:
        try:
            raw = yaml.safe_load(Path(path).read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError("<file>", f"{path}: {exc}") from exc
    try:
        cfg = _build(ExperimentConfig, apply_overrides(raw, overrides), "")
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:  # raised by nested constructors
        raise ConfigError(getattr(exc, "key", "<root>"), str(exc)) from exc
    return validate(cfg)


def config_hash(cfg: ExperimentConfig) -> str:
    """Git-style blob hash of the canonical JSON config."""
    body = canonical_json(cfg.to_dict()).encode()
    return hashlib.sha1(b"blob %d\0" % len(body) + body).hexdigest()


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


# ---------------------------------------------------------------- tasks

@dataclass
class CellData:
    dataset: Dataset
    shards: list
    specs: list
    net: object = None
    eval_data: tuple | None = None
    initial_model: object = None
    w_star: object = None


def quadratic_cell_data(cfg: ExperimentConfig) -> tuple:
    q = cfg.quadratic
    centers = q.center_spread * np.random.default_rng(q.centers_seed).standard_normal((cfg.n_clients, q.dim))
    weights = None if cfg.weights_mode == "uniform" else np.full(cfg.n_clients, 1.0 / cfg.n_clients)
    qdata = make_quadratic_data(centers, q.per_client, q.noise_std, q.data_seed, weights)
    w0 = qdata.task.w_star + q.init_offset
    return qdata, w0


def build_cell_data(cfg: ExperimentConfig, r: float, seed: int) -> CellData:
    if cfg.task == "quadratic":
        qdata, w0 = quadratic_cell_data(cfg)
        return CellData(qdata.dataset, qdata.shards, cfg.layer_specs(), QuadraticNet(), None, as_params(w0),
                        as_params(qdata.task.w_star))
    if cfg.task == "synthetic_classification":
        s = cfg.synthetic
        full = gen_synthetic_classification(s.d, s.classes, s.per_class, s.spread, seed)
        full.features *= s.scale
        train, test = holdout_split(full, s.holdout, seed) if s.holdout > 0 else (full, None)
        eval_data = (test.features, test.labels) if test is not None else None
    else:
        i = cfg.idx
        train = load_idx(i.images, i.labels, i.n_classes)
        if i.limit is not None:
            train = train.subset(np.arange(min(i.limit, len(train))))
        eval_data = None
        if i.test_images and i.test_labels:
            test = load_idx(i.test_images, i.test_labels, i.n_classes)
            eval_data = (test.features, test.labels)
    shards = partition_noniid(train, cfg.n_clients, r, cfg.weights_mode, seed)
    return CellData(train, shards, cfg.layer_specs(train.features.shape[1], train.n_classes), None, eval_data)


def run_cell(cfg: ExperimentConfig, algorithm: str, r: float, cut_layer: int, seed: int):
    """Train one cell; BLAS is pinned to one thread so results do not depend on the worker layout."""
    data = build_cell_data(cfg, r, seed)
    tc = cfg.train_config(algorithm, r, cut_layer, seed, data.specs)
    with threadpool_limits(limits=1):
        return run_algorithm(tc, data.dataset, data.shards, net=data.net, initial_model=data.initial_model,
                             eval_data=data.eval_data, w_star=data.w_star)


# ---------------------------------------------------------------- persistence

def fmt(value) -> str:
    """17 significant digits; missing values are empty."""
    if value is None:
        return ""
    if isinstance(value, (int, np.integer)) and not isinstance(value, bool):
        return str(int(value))
    value = float(value)
    if np.isnan(value):
        return ""
    return format(value, ".17g")


def cell_name(algorithm: str, r: float, cut_layer: int, seed: int) -> str:
    return f"{algorithm}_r{r:g}_lc{cut_layer}_seed{seed}"


def runlog_csv(runlog, cfg: ExperimentConfig, cell: tuple) -> str:
    out = io.StringIO()
    out.write(f"# config: {canonical_json(cfg.to_dict())}\n")
    out.write(f"# config_hash: {config_hash(cfg)}\n")
    a, r, lc, s = cell
    out.write(f"# cell: algorithm={a} r={r:g} cut_layer={lc} seed={s}\n")
    out.write(",".join(CSV_COLUMNS) + "\n")
    for rec in runlog.records:
        row = [rec.i, rec.t, rec.e, rec.m, rec.loss, rec.accuracy, rec.dist_sq, rec.eta_c, rec.eta_s,
               rec.grad_var_at_client_mean, rec.grad_var_across_clients]
        out.write(",".join(fmt(v) for v in row) + "\n")
    final = runlog.final
    out.write(f"# final: loss={fmt(final.loss)} accuracy={fmt(final.accuracy)} steps={final.i}\n")
    return out.getvalue()


def read_csv_rows(path) -> list:
    """Data rows of a persisted run log as dicts of floats (None for empty cells)."""
    rows = []
    header = None
    for line in Path(path).read_text().splitlines():
        if line.startswith("#"):
            continue
        parts = line.split(",")
        if header is None:
            header = parts
            continue
        rows.append({k: (float(v) if v else None) for k, v in zip(header, parts)})
    return rows


def atomic_write(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def output_dir(cfg: ExperimentConfig, override=None) -> Path:
    return Path(override or cfg.output_dir or os.environ.get(OUTPUT_DIR_ENV) or "runs")


def _cell_job(args):
    cfg, cell, out_dir = args
    name = cell_name(*cell)
    try:
        runlog = run_cell(cfg, *cell)
    except NumericError as exc:
        return {"cell": name, "status": "numeric_error", "error": str(exc)}
    atomic_write(Path(out_dir) / f"{name}.csv", runlog_csv(runlog, cfg, cell))
    final = runlog.final
    return {"cell": name, "status": "ok", "final_loss": final.loss, "final_accuracy": final.accuracy}


def summarize(cfg: ExperimentConfig, results: list) -> dict:
    """Per-cell results plus seed-mean matrices indexed [r][L_c] per algorithm."""
    cells = []
    for (a, r, lc, s), res in zip(cfg.cells(), results):
        cells.append({"algorithm": a, "r": r, "cut_layer": lc, "seed": s, "file": f"{res['cell']}.csv",
                      "status": res["status"], "final_loss": res.get("final_loss"),
                      "final_accuracy": res.get("final_accuracy"), "error": res.get("error")})
    matrices = {}
    for a in cfg.algorithms:
        loss = [[None] * len(cfg.cut_layers) for _ in cfg.r_values]
        acc = [[None] * len(cfg.cut_layers) for _ in cfg.r_values]
        for ri, r in enumerate(cfg.r_values):
            for li, lc in enumerate(cfg.cut_layers):
                sel = [c for c in cells if c["algorithm"] == a and c["r"] == r and c["cut_layer"] == lc
                       and c["status"] == "ok"]
                if sel:
                    loss[ri][li] = float(np.mean([c["final_loss"] for c in sel]))
                    if all(c["final_accuracy"] is not None for c in sel):
                        acc[ri][li] = float(np.mean([c["final_accuracy"] for c in sel]))
        matrices[a] = {"final_loss": loss, "final_accuracy": acc}
    return {"config": cfg.to_dict(), "config_hash": config_hash(cfg), "r_values": list(cfg.r_values),
            "cut_layers": list(cfg.cut_layers), "seeds": list(cfg.seeds), "cells": cells, "matrices": matrices}


def run_sweep(cfg: ExperimentConfig, out_dir=None, workers: int = 1) -> dict:
    """Run every cell, write one CSV per cell and ``summary.json``; returns the summary."""
    out = output_dir(cfg, out_dir)
    jobs = [(cfg, cell, str(out)) for cell in cfg.cells()]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_cell_job, jobs))
    else:
        results = [_cell_job(j) for j in jobs]
    summary = summarize(cfg, results)
    atomic_write(out / "summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def with_task(cfg: ExperimentConfig, **changes) -> ExperimentConfig:
    return validate(replace(cfg, **changes))
