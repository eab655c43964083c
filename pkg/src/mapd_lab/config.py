"""Run configuration: JSON loading, schema validation, hashing and seed fan-out."""

from __future__ import annotations

import copy
import hashlib
import json
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import jsonschema
import numpy as np

from .adapt import DEFAULT_LR, MODES, TARGETS
from .backbone import BackboneConfig
from .mapper import MAPPER_KINDS
from .tasks import FAMILIES, PERTURBATIONS, SELECTION_KINDS
from .trainers import METHODS


class ConfigError(ValueError):
    pass


_INT = {"type": "integer"}
_POS = {"type": "integer", "minimum": 1}
_NONNEG = {"type": "integer", "minimum": 0}
_NUM = {"type": "number"}
_PNUM = {"type": "number", "exclusiveMinimum": 0}

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "name": {"type": "string"},
        "seed": _NONNEG,
        "seeds": {"type": "array", "items": _NONNEG, "minItems": 1},
        "backbone": {
            "type": "object", "additionalProperties": False,
            "properties": {"num_layers": _POS, "num_heads": _POS, "d_model": _POS, "d_ff": _POS,
                           "vocab_size": _POS, "max_seq_len": _POS, "seed": _NONNEG,
                           "warmup_steps": _NONNEG, "warmup_batch": _POS, "warmup_lr": _PNUM},
        },
        "mapper": {
            "type": "object", "additionalProperties": False,
            "properties": {"m": _POS, "d_in": _POS, "num_heads": _POS,
                           "kind": {"enum": list(MAPPER_KINDS)}},
        },
        "distribution": {
            "type": "object", "additionalProperties": False,
            "properties": {"episodes_per_family": _POS, "families": {"type": "array", "items": {"enum": list(FAMILIES)}, "minItems": 1},
                           "val_fraction": {"type": "number", "minimum": 0, "maximum": 0.5}},
        },
        "alignment": {
            "type": "object", "additionalProperties": False,
            "properties": {"steps": _NONNEG, "lr": _PNUM, "batch_size": _POS, "seed": _NONNEG},
        },
        "trainer": {
            "type": "object", "additionalProperties": False,
            "properties": {"methods": {"type": "array", "items": {"type": "string"}, "minItems": 1},
                           "inner_steps": _POS, "alpha_init": _PNUM, "beta": {"type": "number", "minimum": 0},
                           "batch_meta_tasks": _POS, "epochs": _NONNEG, "outer_optimizer": {"enum": ["adam", "sgd"]},
                           "learn_rates": {"type": "boolean"}, "examples_per_step": _POS},
        },
        "adaptation": {
            "type": "object", "additionalProperties": False,
            "properties": {"max_steps": _NONNEG, "val_pool_size": _POS,
                           "lr": {"type": "object", "additionalProperties": _PNUM},
                           "target": {"enum": list(TARGETS)}},
        },
        "eval": {
            "type": "object", "additionalProperties": False,
            "properties": {"families": {"type": "array", "items": {"enum": list(FAMILIES)}, "minItems": 1},
                           "shots": {"type": "array", "items": _POS, "minItems": 1},
                           "episodes": _POS, "n_query": _POS,
                           "modes": {"type": "array", "items": {"enum": list(MODES)}, "minItems": 1},
                           "ci": {"enum": ["wald", "wilson"]}},
        },
        "analysis": {
            "type": "object", "additionalProperties": False,
            "properties": {"perturbations": {"type": "array", "items": {"enum": list(PERTURBATIONS)}},
                           "magnitude": {"type": "number", "minimum": 0, "maximum": 1},
                           "selection": {"type": "array", "items": {"enum": list(SELECTION_KINDS)}},
                           "prompt_grid": {"type": "array", "items": _POS},
                           "flops_steps": {"type": "array", "items": _NONNEG},
                           "flops_shots": {"type": "array", "items": _POS},
                           "entropy_shots": {"type": "array", "items": _NONNEG},
                           "entropy_episodes": _POS,
                           "flops_episodes": _POS, "budget_points": _POS,
                           "convergence_shots": _POS, "convergence_episodes": _POS, "extended_steps": _POS,
                           "perturb_family": {"enum": list(FAMILIES)},
                           "perturb_shots": {"type": "array", "items": _POS},
                           "perturb_episodes": _POS,
                           "selection_shots": {"type": "array", "items": _POS},
                           "selection_episodes": _POS,
                           "pool_size": _POS},
        },
        "output_dir": {"type": "string"},
    },
}

DEFAULTS = {
    "name": "default",
    "seed": 0,
    "seeds": [0, 1, 2],
    "backbone": asdict(BackboneConfig()),
    "mapper": {"m": 16, "d_in": 32, "num_heads": 4, "kind": "sp_att"},
    "distribution": {"episodes_per_family": 200, "families": list(FAMILIES), "val_fraction": 0.02},
    "alignment": {"steps": 2000, "lr": 0.5, "batch_size": 32, "seed": 0},
    "trainer": {"methods": list(METHODS), "inner_steps": 5, "alpha_init": 0.1, "beta": 1e-3,
                "batch_meta_tasks": 4, "epochs": 1, "outer_optimizer": "adam", "learn_rates": True,
                "examples_per_step": 20},
    "adaptation": {"max_steps": 30, "val_pool_size": 32, "lr": dict(DEFAULT_LR), "target": "mapper"},
    "eval": {"families": list(FAMILIES), "shots": [1, 2, 4, 8], "episodes": 17, "n_query": 4,
             "modes": ["finetune", "icl"], "ci": "wald"},
    "analysis": {"perturbations": ["none", "gaussian_noise", "patch_drop", "patch_shuffle", "feature_mix"],
                 "magnitude": 0.5, "selection": list(SELECTION_KINDS), "prompt_grid": [4, 8, 16, 32],
                 "flops_steps": [0, 1, 2, 5, 10, 20, 30], "flops_shots": [1, 2, 4, 8],
                 "entropy_shots": [0, 1, 2, 4, 8], "entropy_episodes": 8,
                 "flops_episodes": 8, "budget_points": 8,
                 "convergence_shots": 4, "convergence_episodes": 16, "extended_steps": 40,
                 "perturb_family": "concept_binding", "perturb_shots": [2, 5], "perturb_episodes": 8,
                 "selection_shots": [1, 2, 4], "selection_episodes": 12, "pool_size": 256},
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "lr":
            out[k] = _merge(out[k], v)
        elif k == "lr" and isinstance(v, dict):
            out[k] = {**out.get(k, {}), **v}
        else:
            out[k] = copy.deepcopy(v)
    return out


def validate(raw: dict):
    validator = jsonschema.Draft7Validator(SCHEMA)
    errors = sorted(validator.iter_errors(raw), key=lambda e: list(e.absolute_path))
    if errors:
        lines = []
        for e in errors:
            path = ".".join(str(p) for p in e.absolute_path) or "<root>"
            lines.append(f"{path}: {e.message}")
        raise ConfigError("invalid configuration:\n  " + "\n  ".join(lines))
    methods = raw.get("trainer", {}).get("methods", [])
    bad = [m for m in methods if m not in METHODS]
    if bad:
        raise ConfigError(f"trainer.methods: unknown method(s) {bad}; valid methods: {', '.join(METHODS)}")
    bb = raw.get("backbone", {})
    if bb and bb.get("d_model", 64) % bb.get("num_heads", 4):
        raise ConfigError("backbone.d_model: must be divisible by backbone.num_heads")


def resolve(raw: dict | None = None, seed: int | None = None) -> dict:
    """Defaults merged with ``raw``, validated, with an optional seed override."""
    raw = raw or {}
    validate(raw)
    cfg = _merge(DEFAULTS, raw)
    if seed is not None:
        cfg["seed"] = seed
        if "seeds" not in raw:
            cfg["seeds"] = [seed]
    validate(cfg)
    return cfg


def load(path, seed: int | None = None) -> dict:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError as err:
        raise ConfigError(f"config file not found: {path}") from err
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path}: invalid JSON ({err.msg} at line {err.lineno})") from err
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return resolve(raw, seed)


def canonical(cfg: dict) -> str:
    return json.dumps(cfg, sort_keys=True, separators=(",", ":"))


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(canonical(cfg).encode()).hexdigest()


def derive_seed(root: int, *labels) -> int:
    """Independent child seed for ``labels`` under ``root`` (counter-based, order-free)."""
    key = [int(root)] + [zlib.crc32(str(l).encode()) for l in labels]
    return int(np.random.SeedSequence(key).generate_state(1, dtype=np.uint32)[0])


def backbone_config(cfg: dict) -> BackboneConfig:
    return BackboneConfig(**cfg["backbone"])
