"""Experiment configuration: profiles, YAML loading, overrides and schema checks.

A config is resolved in layers: profile defaults, then the YAML file, then
``key.sub=value`` overrides.  The merged mapping is validated against
:data:`SCHEMA` before any dataclass is built.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import jsonschema
import yaml

from .errors import ConfigError
from .inversion import InversionConfig
from .training import DEBIAS_MODES, TrainConfig

DATASETS = ("digits", "oracle", "cifar10", "cifar100", "tiny-imagenet")

_num = {"type": "number"}
_nonneg = {"type": "number", "minimum": 0}
_posint = {"type": "integer", "minimum": 1}

SCHEMA: dict = {
    "type": "object",
    "additionalProperties": False,
    "required": ["dataset", "num_tasks", "backbone", "inversion", "train"],
    "properties": {
        "name": {"type": "string"},
        "profile": {"enum": ["desk", "full"]},
        "dataset": {"enum": list(DATASETS)},
        "dataset_root": {"type": ["string", "null"]},
        "num_tasks": _posint,
        "class_order": {
            "oneOf": [
                {"type": "null"},
                {"type": "integer", "minimum": 0, "maximum": 2},
                {"type": "array", "items": {"type": "integer", "minimum": 0}},
            ]
        },
        "class_order_seed": {"type": "integer"},
        "seed": {"type": "integer"},
        "deterministic": {"type": "boolean"},
        "out_dir": {"type": "string"},
        "save_checkpoints": {"type": "boolean"},
        "first_task_epochs": {"type": ["integer", "null"], "minimum": 1},
        "incremental_lr": {"type": ["number", "null"], "exclusiveMinimum": 0},
        "estimation_batch_size": _posint,
        "backbone": {
            "type": "object",
            "required": ["kind"],
            "properties": {"kind": {"enum": ["identity", "mlp", "small_conv", "resnet32", "resnet18"]}},
        },
        "oracle": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "num_classes": _posint,
                "feature_dim": _posint,
                "samples_per_class": _posint,
                "test_per_class": _posint,
                "separation": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "inversion": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "steps": _posint,
                "batch_size": {"type": "integer", "minimum": 2},
                "lr": {"type": "number", "exclusiveMinimum": 0},
                "ce_weight": _nonneg,
                "stat_weight": _nonneg,
                "div_weight": _nonneg,
                "dce_weight": _nonneg,
                "temperature": {"type": "number", "exclusiveMinimum": 0},
                "noise_dim": _posint,
                "generator_width": {"type": "integer", "minimum": 2},
                "div_sign": {"enum": [1, -1, 1.0, -1.0]},
                "seed": {"type": "integer"},
                "log_every": _posint,
                "sample_every": {"type": "integer", "minimum": 0},
            },
        },
        "train": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "epochs": _posint,
                "batch_size": _posint,
                "lr": {"type": "number", "exclusiveMinimum": 0},
                "momentum": _nonneg,
                "weight_decay": _nonneg,
                "milestones": {"type": "array", "items": {"type": "integer", "minimum": 0}},
                "lr_gamma": {"type": "number", "exclusiveMinimum": 0},
                "hkd_weight": _nonneg,
                "hkd_scale_by_ratio": {"type": "boolean"},
                "lce_weight": _nonneg,
                "rkd_weight": _nonneg,
                "war_weight": _nonneg,
                "war_pairing": {"enum": ["cross", "same"]},
                "temperature": {"type": "number", "exclusiveMinimum": 0},
                "debias_mode": {"enum": list(DEBIAS_MODES)},
                "replay": {"type": "boolean"},
                "augment": {"type": "boolean"},
                "seed": {"type": "integer"},
            },
        },
    },
}


@dataclass
class ExperimentConfig:
    dataset: str = "digits"
    num_tasks: int = 5
    backbone: dict = field(default_factory=lambda: {"kind": "small_conv", "in_channels": 1})
    inversion: InversionConfig = field(default_factory=InversionConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    name: str = "cwd"
    profile: str = "desk"
    dataset_root: str | None = None
    class_order: Any = 0
    class_order_seed: int = 0
    seed: int = 0
    deterministic: bool = True
    out_dir: str = "runs/cwd"
    save_checkpoints: bool = True
    first_task_epochs: int | None = None
    incremental_lr: float | None = None  # SGD lr for tasks after the first; None keeps train.lr
    estimation_batch_size: int = 128
    oracle: dict = field(default_factory=dict)

    @property
    def dce_weight(self) -> float:
        return self.inversion.dce_weight

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        d = self.to_dict()
        d.pop("out_dir", None)
        blob = json.dumps(d, sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def replace(self, **changes) -> "ExperimentConfig":
        """Copy with dotted-key overrides, e.g. ``replace(**{"train.war_weight": 0})``."""
        return from_dict(apply_overrides(self.to_dict(), [f"{k}={json.dumps(v)}" for k, v in changes.items()]))

    def dump(self, path: str | Path):
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))


def profile_defaults(profile: str = "desk", dataset: str = "digits") -> dict:
    """Default settings for the desk (CI-sized) and full-scale profiles."""
    if profile == "full":
        inv = dataclasses.asdict(InversionConfig())
        tr = dataclasses.asdict(TrainConfig(augment=True))
        backbone = {"kind": "resnet18" if dataset == "imagenet100" else "resnet32", "in_channels": 3}
        if dataset == "tiny-imagenet":
            tr["weight_decay"] = 2e-4
        return {"profile": "full", "dataset": dataset, "num_tasks": 5, "backbone": backbone,
                "inversion": inv, "train": tr}
    # Desk profile, calibrated on the 8x8 digits split.
    inv = dataclasses.asdict(InversionConfig(steps=500, batch_size=64))
    tr = dataclasses.asdict(TrainConfig(epochs=60, batch_size=32, lr=0.05, milestones=[36, 51]))
    backbone = {"kind": "small_conv", "in_channels": 1}
    # Later tasks use a smaller step so replay can hold the old decision boundaries.
    out = {"profile": "desk", "dataset": dataset, "num_tasks": 5, "backbone": backbone,
           "inversion": inv, "train": tr, "incremental_lr": 0.01}
    if dataset == "oracle":
        out["backbone"] = {"kind": "mlp", "in_dim": 8, "out_dim": 16, "hidden": [32]}
        out["oracle"] = {"num_classes": 8, "feature_dim": 8, "samples_per_class": 500,
                         "test_per_class": 200, "separation": 3.0}
        out["num_tasks"] = 2
        out["class_order"] = None
    return out


def _deep_merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k not in ("backbone",):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def apply_overrides(raw: dict, overrides) -> dict:
    """Apply ``a.b=value`` strings; values are parsed as YAML scalars/lists."""
    out = copy.deepcopy(raw)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, value = item.split("=", 1)
        node = out
        parts = key.strip().split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a non-mapping")
        node[parts[-1]] = _parse_value(value)
    return out


def _parse_value(text: str):
    value = yaml.safe_load(text)
    if isinstance(value, str):
        # YAML 1.1 reads "1e-3" as a string; accept plain float literals too.
        try:
            return float(value)
        except ValueError:
            pass
    return value


def _non_finite(node, path=""):
    if isinstance(node, float) and not math.isfinite(node):
        return path or "<root>"
    if isinstance(node, dict):
        items = node.items()
    elif isinstance(node, list):
        items = enumerate(node)
    else:
        return None
    for k, v in items:
        hit = _non_finite(v, f"{path}.{k}" if path else str(k))
        if hit:
            return hit
    return None


def validate(raw: dict):
    bad = _non_finite(raw)
    if bad:
        raise ConfigError(f"invalid config at {bad}: value must be finite")
    try:
        jsonschema.validate(raw, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = ".".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"invalid config at {where}: {exc.message}") from None


def from_dict(raw: dict) -> ExperimentConfig:
    validate(raw)
    data = copy.deepcopy(raw)
    inv = InversionConfig(**data.pop("inversion", {}))
    tr = TrainConfig(**data.pop("train", {}))
    try:
        inv.validate()
        tr.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return ExperimentConfig(inversion=inv, train=tr, **data)


def resolve_config(path: str | Path | None = None, overrides=(), profile: str | None = None,
                   seed: int | None = None, out_dir: str | None = None) -> ExperimentConfig:
    """Load a config file on top of profile defaults and apply CLI overrides."""
    user: dict = {}
    if path is not None:
        try:
            user = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if not isinstance(user, dict):
            raise ConfigError("config file must contain a mapping")
    prof = profile or user.get("profile", "desk")
    dataset = user.get("dataset", "digits")
    for item in overrides or ():
        if item.startswith("dataset="):
            dataset = item.split("=", 1)[1].strip()
    raw = _deep_merge(profile_defaults(prof, dataset), user)
    raw["profile"] = prof
    if seed is not None:
        raw["seed"] = seed
    if out_dir is not None:
        raw["out_dir"] = out_dir
    raw = apply_overrides(raw, overrides)
    return from_dict(raw)
