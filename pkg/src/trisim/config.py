"""Run configuration: a strict JSON schema plus cross-field checks."""
from __future__ import annotations

import copy
import json
from pathlib import Path

import jsonschema

from .encoder import BlockSelection

_POS_INT = {"type": "integer", "minimum": 1}
_NULLABLE_POS_INT = {"anyOf": [_POS_INT, {"type": "null"}]}


def _section(properties: dict, optional: tuple[str, ...] = ()) -> dict:
    return {
        "type": "object",
        "properties": properties,
        "required": [k for k in properties if k not in optional],
        "additionalProperties": False,
    }


SCHEMA = _section({
    "encoder": _section({
        "mode": {"enum": ["synth", "file"]},
        "H": _POS_INT,
        "L": _POS_INT,
        "D": _POS_INT,
        "vocab": {"type": "integer", "minimum": 2},
        "seed": {"type": "integer", "minimum": 0},
    }),
    "blocks": _section({
        "strategy": {"anyOf": [
            {"enum": ["all", "top_half", "bottom_half", "spaced_half"]},
            {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 1},
        ]},
        "adaptive": {"type": "boolean"},
        "reduction": _NULLABLE_POS_INT,
    }, optional=("reduction",)),
    "attention": _section({
        "sa": {"type": "boolean"},
        "fa": {"enum": ["none", "fa1", "fa2", "fa3"]},
        "d_prime": _NULLABLE_POS_INT,
        "scale_scores": {"type": "boolean"},
        "tied": {"type": "boolean"},
        "reduction": _NULLABLE_POS_INT,
    }, optional=("tied", "reduction")),
    "fusion": _section({
        "mode": {"enum": ["pooling", "rfm"]},
        "k": _POS_INT,
        "psi_sizes": {"type": "array", "items": _POS_INT, "minItems": 1},
        "phi_size": _POS_INT,
        "dilations": {"type": "array", "items": _POS_INT, "minItems": 1},
        "d_dprime": _POS_INT,
    }),
    "head": _section({
        "hidden": _POS_INT,
        "labels": {"enum": ["binary", "ternary"]},
    }),
    "train": _section({
        "epochs": _POS_INT,
        "batch_size": _POS_INT,
        "lr": {"type": "number", "exclusiveMinimum": 0},
        "beta1": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "beta2": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "eps": {"type": "number", "exclusiveMinimum": 0},
        "patience": _POS_INT,
        "decay": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "seed": {"type": "integer", "minimum": 0},
        "clip_norm": {"anyOf": [{"type": "number", "exclusiveMinimum": 0}, {"type": "null"}]},
    }, optional=("clip_norm",)),
})

DEFAULT_CONFIG = {
    "encoder": {"mode": "synth", "H": 4, "L": 12, "D": 32, "vocab": 50, "seed": 0},
    "blocks": {"strategy": "all", "adaptive": True},
    "attention": {"sa": True, "fa": "fa3", "d_prime": 16, "scale_scores": False},
    "fusion": {"mode": "rfm", "k": 3, "psi_sizes": [1, 3, 5], "phi_size": 3,
               "dilations": [1, 2, 3], "d_dprime": 16},
    "head": {"hidden": 64, "labels": "binary"},
    "train": {"epochs": 15, "batch_size": 32, "lr": 0.001, "beta1": 0.9, "beta2": 0.999,
              "eps": 1e-8, "patience": 10, "decay": 0.1, "seed": 0},
}


class ConfigError(ValueError):
    pass


def _path(error: jsonschema.ValidationError) -> str:
    parts = [str(p) for p in error.absolute_path]
    if error.validator == "required":
        missing = error.message.split("'")[1]
        return ".".join(parts + [missing])
    if error.validator == "additionalProperties":
        extra = error.message.split("'")[1]
        return ".".join(parts + [extra])
    return ".".join(parts) or "<root>"


def validate(cfg: dict) -> dict:
    """Check ``cfg`` against the schema and cross-field rules; return it unchanged."""
    errors = sorted(jsonschema.Draft202012Validator(SCHEMA).iter_errors(cfg),
                    key=lambda e: list(map(str, e.absolute_path)))
    if errors:
        e = errors[0]
        kind = {"required": "missing required key", "additionalProperties": "unknown key"}.get(
            e.validator, e.message)
        raise ConfigError(f"{_path(e)}: {kind}")
    enc, fus = cfg["encoder"], cfg["fusion"]
    if not (fus["k"] == len(fus["psi_sizes"]) == len(fus["dilations"])):
        raise ConfigError("fusion: psi_sizes and dilations must both have k entries")
    if any(a > b for a, b in zip(fus["dilations"], fus["dilations"][1:])):
        raise ConfigError("fusion.dilations: must be non-decreasing")
    strategy = cfg["blocks"]["strategy"]
    try:
        BlockSelection(strategy if isinstance(strategy, str) else tuple(strategy)).indices(enc["H"])
    except ValueError as exc:
        raise ConfigError(f"blocks.strategy: {exc}") from None
    if enc["mode"] == "synth" and enc["vocab"] < 4:
        raise ConfigError("encoder.vocab: synthetic data needs vocab >= 4")
    return cfg


def default_config(**overrides) -> dict:
    """A validated copy of the desk-scale defaults, with ``section.key`` overrides."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    for dotted, value in overrides.items():
        set_key(cfg, dotted.replace("__", "."), value)
    return validate(cfg)


def set_key(cfg: dict, dotted: str, value) -> None:
    section, key = dotted.split(".")
    cfg[section][key] = value


def load_config(path) -> dict:
    try:
        cfg = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return validate(cfg)


def canonical_json(cfg: dict) -> str:
    return json.dumps(cfg, sort_keys=True, separators=(",", ":"))


def d_prime(cfg: dict) -> int:
    dp = cfg["attention"]["d_prime"]
    return dp if dp is not None else max(1, cfg["encoder"]["D"] // 2)
