"""Experiment configuration: JSON schema, defaults, and per-stage seeds.

Every key has an explicit default below; the resolved configuration is
written next to the results so no threshold or seed is implicit.
"""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

import jsonschema
import numpy as np

from ..errors import ConfigError

SCHEMA_VERSION = 1

_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_pos_or_null = {"anyOf": [_pos, {"type": "null"}]}
_int_pos = {"type": "integer", "minimum": 1}


def _obj(props, required=()):
    return {"type": "object", "properties": props, "required": list(required), "additionalProperties": False}


SCHEMA = _obj({
    "version": {"const": SCHEMA_VERSION},
    "seed": {"type": "integer", "minimum": 0, "maximum": 2**64 - 1},
    "output_dir": {"type": ["string", "null"]},
    "threads": _int_pos,
    "ell": _int_pos,
    "network": _obj({
        "path": {"type": ["string", "null"]},
        "d": _int_pos,
        "m": _int_pos,
        "B": _pos,
        "b_bound": {"type": "number", "minimum": 0},
        "a_range": {"anyOf": [{"type": "null"},
                              {"type": "array", "items": _pos, "minItems": 2, "maxItems": 2}]},
        "sigma_floor": _pos,
        "fixed_biases": {"type": "array", "items": _num},
        "smoothing_tau": _pos_or_null,
    }),
    "coefficients": {"enum": ["sampled", "exact"]},
    "N": _int_pos,
    "N_schedule": {"type": "array", "items": _int_pos},
    "estimator": {"enum": ["regression", "mean"]},
    "estimate_on": {"enum": ["first_half", "all"]},
    "recovery": _obj({
        "eta0": _pos,
        "eta1": _pos_or_null,
        "eta1_rel": _pos,
        "eta2": _pos,
        "eta3": _pos,
        "m_max": {"anyOf": [_int_pos, {"type": "null"}]},
        "noise_factor": _pos_or_null,
        "direction_modes": {"enum": ["all", "first"]},
        "max_retries": {"type": "integer", "minimum": 0},
        "contractions": _int_pos,
        "good_set_c": _pos,
        "refine": {"type": "boolean"},
    }),
    "regression": _obj({
        "enabled": {"type": "boolean"},
        "eps": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "mode": {"enum": ["coordinated-2", "full-8"]},
        "tau": _pos_or_null,
        "radius": _pos_or_null,
        "steps": _int_pos,
        "certify": {"type": "boolean"},
        "n_eval": _int_pos,
    }),
    "artifacts": _obj({
        "dataset": {"type": "boolean"},
        "tensors": {"type": "boolean"},
        "figures": {"type": "boolean"},
    }),
}, required=["version"])

DEFAULTS = {
    "version": SCHEMA_VERSION,
    "seed": 0,
    "output_dir": None,
    "threads": 1,
    "ell": 1,
    "network": {
        "path": None,
        "d": 6,
        "m": 3,
        "B": 2.0,
        "b_bound": 1.0,
        "a_range": None,
        "sigma_floor": 1e-3,
        "fixed_biases": [],
        "smoothing_tau": None,
    },
    "coefficients": "sampled",
    "N": 1_000_000,
    "N_schedule": [],
    "estimator": "regression",
    "estimate_on": "first_half",
    "recovery": {
        "eta0": 1e-2,
        "eta1": None,
        "eta1_rel": 1e-4,
        "eta2": 1e-3,
        "eta3": 0.1,
        "m_max": None,
        "noise_factor": 3.0,
        "direction_modes": "all",
        "max_retries": 5,
        "contractions": 10,
        "good_set_c": 1.5,
        "refine": True,
    },
    "regression": {
        "enabled": True,
        "eps": 0.05,
        "mode": "coordinated-2",
        "tau": None,
        "radius": None,
        "steps": 200_000,
        "certify": True,
        "n_eval": 1_000_000,
    },
    "artifacts": {"dataset": False, "tensors": True, "figures": True},
}


def _merge(base, override):
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def validate(raw):
    """Validate a raw mapping against the schema and fill in defaults."""
    if not isinstance(raw, dict):
        raise ConfigError("configuration must be a JSON object")
    try:
        jsonschema.validate(raw, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"invalid configuration at {where}: {exc.message}") from None
    cfg = _merge(DEFAULTS, raw)
    net = cfg["network"]
    if net["path"] is None and len(net["fixed_biases"]) > net["m"]:
        raise ConfigError("network/fixed_biases has more entries than network/m")
    if cfg["N_schedule"] and sorted(cfg["N_schedule"]) != cfg["N_schedule"]:
        raise ConfigError("N_schedule must be ascending")
    return cfg


def load_config(path):
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read configuration {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from None
    return validate(raw)


def stage_seed(root, stage):
    """64-bit seed for a named stage: SHA-256 of the stage name mixed with the root seed.

    The two 64-bit words (root, name hash) feed a SeedSequence, whose first
    two 32-bit outputs form the stage seed.
    """
    digest = int.from_bytes(hashlib.sha256(stage.encode()).digest()[:8], "little")
    words = np.random.SeedSequence([int(root), digest]).generate_state(2, dtype=np.uint32)
    return int(words[0]) | (int(words[1]) << 32)


STAGES = ("generate", "smooth", "sample", "estimate", "recover", "regress", "evaluate")


def stage_seeds(root):
    return {s: stage_seed(root, s) for s in STAGES}
