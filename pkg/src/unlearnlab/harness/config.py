"""Experiment configuration: TOML files checked against a JSON schema."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import jsonschema

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from ..idi import MIConfig
from ..train import SGD, TrainConfig
from ..unlearn import METHODS, make_params

__all__ = ["ConfigError", "ExperimentConfig", "SCHEMA", "DEFAULTS", "load_config",
           "parse_config", "canonical_digest"]


class ConfigError(ValueError):
    """The configuration is unreadable or violates the schema."""

    def __init__(self, message: str, keys: list[str] | None = None):
        super().__init__(message)
        self.keys = keys or []


_NUM = {"type": "number"}
_POS_INT = {"type": "integer", "minimum": 1}

SCHEMA: dict[str, Any] = {
    "type": "object",
    "additionalProperties": False,
    "required": ["dataset", "split", "model", "pretrain", "methods"],
    "properties": {
        "name": {"type": "string"},
        "seeds": {"type": "array", "items": {"type": "integer"}, "minItems": 1},
        "dataset": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "kind": {"enum": ["blobs", "rings", "spiral", "csv"]},
                "classes": {"type": "integer", "minimum": 2},
                "per_class": {"type": "integer", "minimum": 8},
                "dim": {"type": "integer", "minimum": 2},
                "noise": {"type": "number", "minimum": 0},
                "seed": {"type": "integer"},
                "radius": _NUM,
                "layout": {"enum": ["circle", "line", "simplex"]},
                "hub": {"type": "integer", "minimum": 0},
                "train_csv": {"type": "string"},
                "test_csv": {"type": "string"},
            },
        },
        "split": {
            "type": "object",
            "additionalProperties": False,
            "required": ["mode"],
            "properties": {
                "mode": {"enum": ["classwise", "random"]},
                "forget_classes": {"type": "array", "items": {"type": "integer"}, "minItems": 1},
                "per_class_count": _POS_INT,
                "seed": {"type": "integer"},
            },
        },
        "model": {
            "type": "object",
            "additionalProperties": False,
            "required": ["widths"],
            "properties": {
                "widths": {"type": "array", "items": _POS_INT, "minItems": 2},
                "activation": {"enum": ["tanh", "relu"]},
                "head_depth": _POS_INT,
            },
        },
        "pretrain": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "epochs": _POS_INT,
                "learning_rate": {"type": "number", "exclusiveMinimum": 0},
                "batch_size": _POS_INT,
                "momentum": {"type": "number", "minimum": 0, "maximum": 1},
                "l2": {"type": "number", "minimum": 0},
            },
        },
        "methods": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["name"],
                "properties": {
                    "name": {"enum": sorted(METHODS)},
                    "label": {"type": "string"},
                    "params": {"type": "object"},
                },
            },
        },
        "metrics": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "mia": {"type": "boolean"},
                "mia_variant": {"enum": ["entropy", "confidence"]},
                "jsd": {"type": "boolean"},
                "idi": {"type": "boolean"},
                "probe": {"type": "boolean"},
                "probe_fraction": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "idi_layers": {"type": "array", "items": {"type": "integer", "minimum": 0},
                               "minItems": 1},
            },
        },
        "mi": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "embedding_dim": _POS_INT,
                "batch_size": {"type": "integer", "minimum": 2},
                "epochs": _POS_INT,
                "lr_f": {"type": "number", "exclusiveMinimum": 0},
                "lr_g": {"type": "number", "exclusiveMinimum": 0},
                "replications": _POS_INT,
                "tail_epochs": _POS_INT,
                "eval_fraction": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "forget_ratio": _POS_INT,
                "retain_ratio": _POS_INT,
                "retain_fraction": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "seed": {"type": "integer"},
            },
        },
        "output": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"dir": {"type": "string"}},
        },
    },
}

DEFAULTS: dict[str, Any] = {
    "name": "experiment",
    "seeds": [0, 1, 2, 3, 4],
    "dataset": {"kind": "blobs", "classes": 10, "per_class": 500, "dim": 16, "noise": 0.5,
                "seed": 0, "radius": 5.0, "layout": "circle"},
    "split": {"seed": 0},
    "model": {"activation": "tanh", "head_depth": 1},
    "pretrain": {"epochs": 20, "learning_rate": 0.05, "batch_size": 64, "momentum": 0.9,
                 "l2": 5e-4},
    "metrics": {"mia": True, "mia_variant": "entropy", "jsd": True, "idi": True, "probe": True,
                "probe_fraction": 0.02},
    "mi": {},
    "output": {"dir": "results"},
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def canonical_digest(obj: Any) -> str:
    """SHA-256 of the sorted-key, whitespace-free JSON form."""
    text = json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)
    return hashlib.sha256(text.encode()).hexdigest()


@dataclass(frozen=True)
class ExperimentConfig:
    raw: dict
    source: Path | None = None

    @property
    def name(self) -> str:
        return self.raw["name"]

    @property
    def seeds(self) -> list[int]:
        return list(self.raw["seeds"])

    @property
    def dataset(self) -> dict:
        return self.raw["dataset"]

    @property
    def split(self) -> dict:
        return self.raw["split"]

    @property
    def model(self) -> dict:
        return self.raw["model"]

    @property
    def metrics(self) -> dict:
        return self.raw["metrics"]

    @property
    def methods(self) -> list[dict]:
        return self.raw["methods"]

    @property
    def output_dir(self) -> Path:
        return Path(self.raw["output"]["dir"])

    def method_labels(self) -> list[str]:
        return [m.get("label", m["name"]) for m in self.methods]

    def pretrain_config(self, seed: int) -> TrainConfig:
        p = self.raw["pretrain"]
        return TrainConfig(epochs=p["epochs"], learning_rate=p["learning_rate"],
                           batch_size=p["batch_size"], optimizer=SGD(p["momentum"]), l2=p["l2"],
                           shuffle_seed=seed)

    def mi_config(self) -> MIConfig:
        return MIConfig(**self.raw["mi"])

    def digest(self) -> str:
        """Digest of everything that shapes results (output location excluded)."""
        return canonical_digest({k: v for k, v in self.raw.items() if k != "output"})

    def pretrain_digest(self, role: str, seed: int) -> str:
        keys = ("dataset", "split", "model", "pretrain")
        return canonical_digest({"role": role, "seed": seed, **{k: self.raw[k] for k in keys}})

    def with_overrides(self, seeds: list[int] | None = None,
                       out: str | Path | None = None) -> "ExperimentConfig":
        raw = copy.deepcopy(self.raw)
        if seeds is not None:
            if not seeds:
                raise ConfigError("seeds list is empty", ["seeds"])
            raw["seeds"] = list(seeds)
        if out is not None:
            raw["output"]["dir"] = str(out)
        return ExperimentConfig(raw, self.source)


def _path_of(error: jsonschema.ValidationError) -> str:
    parts = [str(p) for p in error.absolute_path]
    if error.validator == "additionalProperties":
        extra = sorted(set(error.instance) - set(error.schema.get("properties", {})))
        parts.append("|".join(extra))
    elif error.validator == "required":
        missing = [r for r in error.validator_value if r not in error.instance]
        parts.append("|".join(missing))
    return ".".join(parts) or "<root>"


def parse_config(data: dict, source: Path | None = None) -> ExperimentConfig:
    """Validate, fill defaults and check cross-field rules."""
    errors = sorted(jsonschema.Draft202012Validator(SCHEMA).iter_errors(data),
                    key=lambda e: list(map(str, e.absolute_path)))
    if errors:
        keys = [_path_of(e) for e in errors]
        detail = "; ".join(f"{k}: {e.message}" for k, e in zip(keys, errors))
        raise ConfigError(f"config does not match the schema: {detail}", keys)
    raw = _merge(DEFAULTS, data)
    split, ds = raw["split"], raw["dataset"]
    if split["mode"] == "classwise" and "forget_classes" not in split:
        raise ConfigError("classwise split needs forget_classes", ["split.forget_classes"])
    if split["mode"] == "random" and "per_class_count" not in split:
        raise ConfigError("random split needs per_class_count", ["split.per_class_count"])
    if ds["kind"] == "csv" and not {"train_csv", "test_csv"} <= set(ds):
        raise ConfigError("csv datasets need train_csv and test_csv",
                          ["dataset.train_csv", "dataset.test_csv"])
    labels = [m.get("label", m["name"]) for m in raw["methods"]]
    if len(set(labels)) != len(labels) or {"Original", "Retrain"} & set(labels):
        raise ConfigError("method labels must be unique and not Original/Retrain", ["methods"])
    for i, m in enumerate(raw["methods"]):
        try:
            make_params(m["name"], m.get("params"))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(str(exc), [f"methods.{i}.params"]) from exc
    try:
        MIConfig(**raw["mi"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"mi: {exc}", ["mi"]) from exc
    blocks = len(raw["model"]["widths"]) + 1 - raw["model"]["head_depth"]
    if blocks < 2:
        raise ConfigError("the model needs at least two encoder blocks", ["model.widths"])
    layers = raw["metrics"].get("idi_layers")
    if layers is None:
        raw["metrics"]["idi_layers"] = [blocks - 2, blocks - 1]
    elif sorted(set(layers)) != layers or layers[-1] >= blocks:
        raise ConfigError(f"idi_layers must be sorted, unique and below {blocks}",
                          ["metrics.idi_layers"])
    return ExperimentConfig(raw, source)


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        with path.open("rb") as fh:
            data = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: invalid TOML: {exc}") from exc
    return parse_config(data, path)
