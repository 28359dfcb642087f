"""Run configuration: JSON files checked against a published schema plus
cross-field validation before any compute starts."""

from __future__ import annotations

import copy
import hashlib
import json

import jsonschema


class ConfigError(ValueError):
    """Invalid configuration or CLI usage (exit code 2)."""


class MissingArtifact(FileNotFoundError):
    """A required dataset/checkpoint/input file is absent (exit code 4)."""


class NumericFailure(RuntimeError):
    """Numeric breakdown during compute (exit code 3)."""


_GUIDANCE_SCHEMA = {
    "type": "object",
    "properties": {
        "kind": {"enum": ["none", "classifier", "cfg", "interval_cfg", "autoguidance", "sfg"]},
        "weight": {"type": "number"},
        "interval": {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2},
        "companion": {"type": "string"},
        "classifier_class": {"type": "integer"},
        "alpha0": {"type": "number", "minimum": 0},
        "h": {"type": "number", "exclusiveMinimum": 0},
        "sigma_scaled_shift": {"type": "boolean"},
    },
    "required": ["kind"],
    "additionalProperties": False,
}

_TRAIN_SCHEMA = {
    "type": "object",
    "properties": {
        "batches": {"type": "integer", "minimum": 1},
        "batch_size": {"type": "integer", "minimum": 1},
        "warmup_batches": {"type": "integer", "minimum": 0},
        "lr": {"type": "number", "exclusiveMinimum": 0},
        "cosine_anneal": {"type": "boolean"},
        "weight_decay": {"type": "number", "minimum": 0},
        "objective": {"enum": ["dsm", "flow_matching"]},
        "sigma_min": {"type": "number", "exclusiveMinimum": 0},
        "sigma_max": {"type": "number", "exclusiveMinimum": 0},
        "label_dropout": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
    },
    "additionalProperties": False,
}

SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "properties": {
        "task": {"enum": ["simplex", "two_gaussian", "fractal"]},
        "seed": {"type": "integer", "minimum": 0},
        "out": {"type": "string"},
        "threads": {"type": "integer", "minimum": 1},
        "data": {
            "type": "object",
            "properties": {
                "n_train": {"type": "integer", "minimum": 1},
                "n_test": {"type": "integer", "minimum": 1},
                "simplex": {
                    "type": "object",
                    "properties": {
                        "n_components": {"type": "integer", "minimum": 1},
                        "ambient_dim": {"type": "integer", "minimum": 1},
                        "scale": {"type": "number", "exclusiveMinimum": 0},
                    },
                    "required": ["n_components", "ambient_dim", "scale"],
                    "additionalProperties": False,
                },
                "two_gaussian": {
                    "type": "object",
                    "properties": {
                        "separation": {"type": "number", "exclusiveMinimum": 0},
                        "base_variance": {"type": "number", "exclusiveMinimum": 0},
                        "ambient_dim": {"type": "integer", "minimum": 1},
                    },
                    "required": ["separation", "base_variance", "ambient_dim"],
                    "additionalProperties": False,
                },
                "fractal": {
                    "type": "object",
                    "properties": {
                        "depth": {"type": "integer", "minimum": 1},
                        "branch_angle": {"type": "number"},
                        "shrink_ratio": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                        "jitter_sigma": {"type": "number", "minimum": 0},
                        "n_classes": {"type": "integer", "minimum": 1, "maximum": 2},
                    },
                    "required": ["depth", "branch_angle", "shrink_ratio", "jitter_sigma"],
                    "additionalProperties": False,
                },
            },
            "additionalProperties": False,
        },
        "models": {
            "type": "object",
            "minProperties": 1,
            "additionalProperties": {
                "type": "object",
                "properties": {
                    "hidden": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 1},
                    "conditional": {"type": "boolean"},
                    "emb_dim": {"type": "integer", "minimum": 1},
                    "train": _TRAIN_SCHEMA,
                },
                "required": ["hidden"],
                "additionalProperties": False,
            },
        },
        "train": _TRAIN_SCHEMA,
        "schedule": {
            "type": "object",
            "properties": {
                "kind": {"enum": ["sigma", "flow_time"]},
                "n_steps": {"type": "integer", "minimum": 2},
                "sigma_min": {"type": "number", "exclusiveMinimum": 0},
                "sigma_max": {"type": "number", "exclusiveMinimum": 0},
                "rho": {"type": "number", "exclusiveMinimum": 0},
            },
            "additionalProperties": False,
        },
        "sample": {
            "type": "object",
            "properties": {
                "n_samples": {"type": "integer", "minimum": 1},
                "model": {"type": "string"},
                "class_id": {"type": ["integer", "string", "null"]},
                "chunk_size": {"type": "integer", "minimum": 1},
                "tag": {"type": "string"},
            },
            "additionalProperties": False,
        },
        "guidance": {"type": "array", "items": _GUIDANCE_SCHEMA},
        "eval": {
            "type": "object",
            "properties": {
                "sigmas": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}},
                "n_per_region": {"type": "integer", "minimum": 1},
                "outlier_threshold": {"type": ["number", "null"]},
                "frechet_reference_n": {"type": "integer", "minimum": 2},
                "samples_file": {"type": "string"},
                "field": {
                    "type": "object",
                    "properties": {
                        "variances": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}},
                        "grid_lo": {"type": "number"},
                        "grid_hi": {"type": "number"},
                        "grid_n": {"type": "integer", "minimum": 2},
                    },
                    "additionalProperties": False,
                },
            },
            "additionalProperties": False,
        },
        "sweep": {
            "type": "object",
            "properties": {
                "kind": {"enum": ["classifier", "cfg", "interval_cfg", "autoguidance", "sfg"]},
                "weights": {"type": "array", "items": {"type": "number"}, "minItems": 1},
                "alphas": {"type": ["array", "null"], "items": {"type": "number", "minimum": 0}},
                "h_values": {"type": ["array", "null"], "items": {"type": "number", "exclusiveMinimum": 0}},
                "metrics": {"type": "array", "items": {"type": "string"}, "minItems": 1},
                "companion": {"type": "string"},
                "interval": {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2},
            },
            "required": ["kind", "weights"],
            "additionalProperties": False,
        },
    },
    "required": ["task", "seed"],
    "additionalProperties": False,
}

DEFAULTS = {
    "threads": 1,
    "out": "runs/out",
    "data": {"n_train": 1000, "n_test": 1000},
    "train": {
        "batches": 3000, "batch_size": 200, "warmup_batches": 100, "lr": 1e-3,
        "cosine_anneal": True, "weight_decay": 1e-5, "objective": "dsm",
        "sigma_min": 0.02, "sigma_max": 10.0, "label_dropout": 0.1,
    },
    "schedule": {"kind": "sigma", "n_steps": 100, "sigma_min": 0.002, "sigma_max": 80.0, "rho": 7.0},
    "sample": {"n_samples": 1000, "model": "main", "class_id": None, "chunk_size": 256},
    "guidance": [{"kind": "none"}],
    "eval": {"n_per_region": 1000, "outlier_threshold": None, "frechet_reference_n": 4000},
}


def _deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _cross_field_check(cfg: dict) -> None:
    task = cfg["task"]
    if task not in cfg.get("data", {}):
        raise ConfigError(f"task {task!r} needs a data.{task} section")
    models = cfg.get("models", {})
    for spec in cfg.get("guidance", []):
        kind = spec["kind"]
        if kind in ("cfg", "interval_cfg", "autoguidance"):
            comp = spec.get("companion")
            if comp is None:
                raise ConfigError(f"guidance kind {kind!r} needs a companion model name")
            if comp not in models:
                raise ConfigError(f"guidance companion {comp!r} not among models {sorted(models)}")
        if kind in ("cfg", "interval_cfg"):
            main = cfg.get("sample", {}).get("model", "main")
            if not models.get(main, {}).get("conditional", False):
                raise ConfigError(f"{kind} needs a conditional main model (got {main!r})")
        if kind == "classifier":
            if task == "fractal":
                raise ConfigError("classifier guidance needs a mixture task (exact Bayes oracle)")
            if spec.get("classifier_class") is None:
                raise ConfigError("classifier guidance needs classifier_class")
        if kind == "interval_cfg" and "interval" not in spec:
            raise ConfigError("interval_cfg needs an interval")
    sample_model = cfg.get("sample", {}).get("model", "main")
    if models and sample_model not in models:
        raise ConfigError(f"sample.model {sample_model!r} not among models {sorted(models)}")
    sweep = cfg.get("sweep")
    if sweep:
        if sweep["kind"] in ("cfg", "interval_cfg", "autoguidance"):
            comp = sweep.get("companion")
            if comp is None or comp not in models:
                raise ConfigError(f"sweep kind {sweep['kind']!r} needs a companion among models")
        if sweep["kind"] == "interval_cfg" and "interval" not in sweep:
            raise ConfigError("interval_cfg sweep needs an interval")


def validate_config(raw: dict) -> dict:
    """Schema check, defaults, then cross-field checks; returns the merged config."""
    try:
        jsonschema.validate(raw, SCHEMA)
    except jsonschema.ValidationError as exc:
        raise ConfigError(f"config schema violation at {list(exc.absolute_path)}: {exc.message}") from exc
    cfg = _deep_merge(DEFAULTS, raw)
    _cross_field_check(cfg)
    return cfg


def load_config(path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except FileNotFoundError as exc:
        raise MissingArtifact(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return validate_config(raw)


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()
