"""Experiment configuration: YAML schema, dotted overrides, hashing."""
from __future__ import annotations

import copy
import hashlib
import json
import os
import re
from dataclasses import dataclass
from pathlib import Path

import yaml

from .errors import ConfigError
from .fisher import ACCUMULATE_MODES, FISHER_MODES
from .solver import SolverConfig

SCHEMA_VERSION = 1
METHODS = ("drcl_l1", "drcl_l2", "sgd", "ewc")
METHOD_REGULARIZER = {"drcl_l1": "l1_weighted", "drcl_l2": "l2_weighted", "sgd": "none", "ewc": "none"}

# Every accepted key, with its default. ``None`` marks "derive at run time".
DEFAULTS = {
    "schema_version": SCHEMA_VERSION,
    "method": "drcl_l1",
    "epochs_per_task": 1,
    "seeds": [0],
    "output_dir": "runs/default",
    "network": {"hidden_dims": [256, 128], "activation": "relu"},
    "tasks": {
        "kind": "split_class",
        "num_tasks": 5,
        "train_fraction": 0.8,
        "drop_remainder": False,
        "shared_head": None,
        "seed": None,
        "source": {
            "type": "blobs",
            "n_classes": 20,
            "n_per_class": 50,
            "dim": 32,
            "separation": 4.0,
            "seed": 0,
            "images": None,
            "labels": None,
            "limit": None,
        },
    },
    "solver": {
        "eta": 5e-3,
        "gamma": None,
        "lambda": 10.0,
        "max_iter": 5,
        "residual_tol": None,
        "regularizer": None,
        "inner_batches_per_iter": None,
        "batch_size": 32,
        "warm_start": True,
    },
    "fisher": {"mode": "true", "n_samples": None, "accumulate": "none"},
    "ewc": {"lambda": 1.0, "accumulate": "sum", "normalize": False},
}

_NUMBER = re.compile(r"^[+-]?(\d+\.?\d*|\.\d+)([eE][+-]?\d+)?$")


def _coerce(value):
    if isinstance(value, str) and _NUMBER.match(value.strip()):
        return float(value) if re.search(r"[.eE]", value) else int(value)
    if isinstance(value, list):
        return [_coerce(v) for v in value]
    return value


def _merge(defaults: dict, given: dict, prefix=""):
    out = copy.deepcopy(defaults)
    for key, value in given.items():
        path = f"{prefix}{key}"
        if key not in defaults:
            raise ConfigError(f"unknown config key {path!r}")
        if isinstance(defaults[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {path!r} must be a mapping")
            out[key] = _merge(defaults[key], value, path + ".")
        else:
            out[key] = _coerce(value)
    return out


def apply_override(raw: dict, assignment: str) -> dict:
    """Apply one ``dotted.key=value`` override; the value is parsed as YAML."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not of the form key=value")
    key, text = assignment.split("=", 1)
    parts = key.strip().split(".")
    node, schema = raw, DEFAULTS
    for p in parts[:-1]:
        if not isinstance(schema, dict) or p not in schema or not isinstance(schema[p], dict):
            raise ConfigError(f"unknown config key {key!r}")
        schema = schema[p]
        node = node.setdefault(p, {})
    if not isinstance(schema, dict) or parts[-1] not in schema or isinstance(schema[parts[-1]], dict):
        raise ConfigError(f"unknown config key {key!r}")
    node[parts[-1]] = _coerce(yaml.safe_load(text))
    return raw


def resolve(raw: dict, overrides=()) -> dict:
    raw = copy.deepcopy(raw or {})
    for o in overrides:
        apply_override(raw, o)
    d = _merge(DEFAULTS, raw)
    if d["fisher"]["mode"] is True:  # unquoted ``mode: true`` parses as a boolean
        d["fisher"]["mode"] = "true"
    validate(d)
    return d


def validate(d: dict) -> None:
    if d["schema_version"] != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {d['schema_version']} (expected {SCHEMA_VERSION})")
    if d["method"] not in METHODS:
        raise ConfigError(f"method must be one of {METHODS}, got {d['method']!r}")
    reg = d["solver"]["regularizer"]
    if reg is not None and reg != METHOD_REGULARIZER[d["method"]]:
        raise ConfigError(f"method {d['method']} is inconsistent with solver.regularizer={reg}")
    if int(d["epochs_per_task"]) < 1:
        raise ConfigError("epochs_per_task must be >= 1")
    if not d["seeds"] or not all(isinstance(s, int) for s in d["seeds"]):
        raise ConfigError(f"seeds must be a non-empty list of integers, got {d['seeds']!r}")
    if d["fisher"]["mode"] not in FISHER_MODES:
        raise ConfigError(f"fisher.mode must be one of {FISHER_MODES}")
    for section in ("fisher", "ewc"):
        if d[section]["accumulate"] not in ACCUMULATE_MODES:
            raise ConfigError(f"{section}.accumulate must be one of {ACCUMULATE_MODES}")
    src = d["tasks"]["source"]
    if src["type"] not in ("blobs", "idx"):
        raise ConfigError(f"tasks.source.type must be 'blobs' or 'idx', got {src['type']!r}")
    if src["type"] == "idx" and not (src["images"] and src["labels"]):
        raise ConfigError("idx source needs tasks.source.images and tasks.source.labels")
    solver_config(d)


def solver_config(d: dict) -> SolverConfig:
    s = d["solver"]
    return SolverConfig(
        eta=float(s["eta"]),
        gamma=None if s["gamma"] is None else float(s["gamma"]),
        lam=float(s["lambda"]),
        max_iter=int(s["max_iter"]),
        residual_tol=None if s["residual_tol"] is None else float(s["residual_tol"]),
        regularizer=s["regularizer"] or METHOD_REGULARIZER[d["method"]],
        inner_batches_per_iter=s["inner_batches_per_iter"],
        batch_size=int(s["batch_size"]),
        epochs=int(d["epochs_per_task"]),
        warm_start=bool(s["warm_start"]),
    )


def load_config(path, overrides=()) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path} must contain a mapping at top level")
    raw.setdefault("output_dir", os.environ.get("DRCL_OUTPUT_DIR", DEFAULTS["output_dir"]))
    return resolve(raw, overrides)


def config_hash(d: dict) -> str:
    """Digest of everything that determines results except seeds and output location."""
    payload = {k: v for k, v in d.items() if k not in ("seeds", "output_dir")}
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


@dataclass(frozen=True)
class ExperimentConfig:
    raw: dict

    @classmethod
    def from_dict(cls, d: dict, overrides=()) -> "ExperimentConfig":
        return cls(resolve(d, overrides))

    @property
    def method(self):
        return self.raw["method"]

    @property
    def seeds(self):
        return list(self.raw["seeds"])

    @property
    def output_dir(self):
        return Path(self.raw["output_dir"])

    @property
    def solver(self) -> SolverConfig:
        return solver_config(self.raw)

    @property
    def hash(self) -> str:
        return config_hash(self.raw)
