"""Versioned JSON run configuration with strict validation and defaults."""

from __future__ import annotations

import copy
import json
from typing import Any, Optional

import jsonschema

from .errors import ConfigError

SCHEMA_VERSION = 1

_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_posint = {"type": "integer", "minimum": 1}
_vec = {"type": "array", "items": _num, "minItems": 1}
_mat = {"type": "array", "items": _vec, "minItems": 1}
_control = {
    "oneOf": [
        {"type": "null"},
        {"type": "object", "additionalProperties": False, "required": ["kind"],
         "properties": {"kind": {"enum": ["square", "sine"]}, "amplitude": _num,
                        "period": _pos}},
    ]
}


def _obj(props, required=()):
    return {"type": "object", "additionalProperties": False, "properties": props,
            "required": list(required)}


SCHEMA = _obj({
    "version": {"const": SCHEMA_VERSION},
    "system": _obj({"preset": {"enum": ["vanderpol", "duffing"]},
                    "inflate_input": {"type": "boolean"}}, ["preset"]),
    "data": _obj({
        "trajectories": _posint,
        "duration": _pos,
        "Ts": _pos,
        "sampler": _obj({"kind": {"enum": ["circle", "disk", "vanderpol_interior"]},
                         "radius": _pos}, ["kind"]),
        "seed": {"type": "integer", "minimum": 0},
        "controlled": {"oneOf": [{"type": "null"}, _obj({"duration": _pos, "low": _num,
                                                          "high": _num})]},
    }),
    "lift": _obj({
        "N": _posint,
        "partition": {"oneOf": [{"type": "null"},
                                {"type": "array", "items": _posint, "minItems": 1}]},
        "eigmode": {"enum": ["lattice", "optimized"]},
        "extension": {"enum": ["auto", "linear", "rbf", "nearest"]},
        "delta2": {"type": "number", "minimum": 0},
        "restarts": {"type": "integer", "minimum": 0},
        "max_iter": _posint,
        "products": {"type": "array", "items": _obj({
            "indices": {"type": "array", "items": {"type": "integer", "minimum": 0},
                        "minItems": 1},
            "powers": _vec}, ["indices", "powers"])},
    }),
    "predictor": _obj({
        "c_mode": {"enum": ["bdiag", "l2_fit", "sup_fit"]},
        "c_noise": {"type": "number", "minimum": 0},
        "b_steps": {"oneOf": [{"type": "null"}, _posint]},
    }),
    "predict": _obj({"x0": _vec, "horizon": {"type": "number", "minimum": 0},
                     "control": _control}),
    "table": _obj({
        "N": {"type": "array", "items": _posint, "minItems": 1},
        "eigmodes": {"type": "array", "items": {"enum": ["lattice", "optimized"]},
                     "minItems": 1},
        "controls": {"type": "array", "items": _control, "minItems": 1},
        "trials": _posint,
        "horizon": _pos,
    }),
    "mpc": {"oneOf": [{"type": "null"}, _obj({
        "Np": _posint,
        "Q": _mat,
        "R": _mat,
        "QN": {"oneOf": [{"type": "null"}, _mat]},
        "u_min": _vec,
        "u_max": _vec,
        "reference": _obj({"times": _vec, "values": _mat}, ["times", "values"]),
        "x0": _vec,
        "duration": {"type": "number", "minimum": 0},
    }, ["Np", "Q", "R"])]},
    "outputs": _obj({"directory": {"type": "string"}, "plots": {"type": "boolean"},
                     "timings": {"type": "boolean"}}),
}, ["version", "system"])

PRESET_DEFAULTS = {
    "vanderpol": {
        "data": {"trajectories": 100, "duration": 5.0, "Ts": 0.01,
                 "sampler": {"kind": "circle", "radius": 0.05}, "seed": 0,
                 "controlled": {"duration": 2.0, "low": -1.0, "high": 1.0}},
        "predictor": {"c_mode": "l2_fit", "c_noise": 0.05, "b_steps": None},
        "predict": {"x0": [-0.1382, 0.1728], "horizon": 1.0,
                    "control": {"kind": "square", "amplitude": 1.0, "period": 0.3}},
        "table": {"N": [4, 8, 12, 16, 20]},
    },
    "duffing": {
        "data": {"trajectories": 100, "duration": 8.0, "Ts": 0.01,
                 "sampler": {"kind": "circle", "radius": 1.0}, "seed": 0,
                 "controlled": {"duration": 2.0, "low": -1.0, "high": 1.0}},
        "predictor": {"c_mode": "bdiag", "c_noise": 0.0, "b_steps": None},
        "predict": {"x0": [0.3, -0.4], "horizon": 1.0,
                    "control": {"kind": "square", "amplitude": 1.0, "period": 0.3}},
        "table": {"N": [12, 16, 20, 24, 28]},
        "mpc": {"Np": 100, "Q": [[1.0, 0.0], [0.0, 0.1]], "R": [[1e-4]], "QN": None,
                "u_min": [-1.0], "u_max": [1.0],
                "reference": {"times": [0.0, 7.5, 15.0, 22.5],
                              "values": [[0.5, 0.0], [-0.5, 0.0], [0.0, 0.0], [0.25, 0.0]]},
                "x0": [0.0, 0.0], "duration": 30.0},
    },
}

COMMON_DEFAULTS = {
    "system": {"inflate_input": False},
    "lift": {"N": 20, "partition": None, "eigmode": "optimized", "extension": "auto",
             "delta2": 0.0, "restarts": 5, "max_iter": 200, "products": []},
    "table": {"eigmodes": ["lattice", "optimized"],
              "controls": [None, {"kind": "square", "amplitude": 1.0, "period": 0.3}],
              "trials": 500, "horizon": 1.0},
    "mpc": None,
    "outputs": {"directory": "out", "plots": True, "timings": True},
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _describe(err: jsonschema.ValidationError) -> str:
    path = "/".join(str(p) for p in err.absolute_path) or "<root>"
    if err.validator == "additionalProperties":
        return f"{path}: {err.message}"
    return f"{path}: {err.message}"


def validate(doc: Any) -> dict:
    """Check ``doc`` against the schema and fill in preset defaults.

    Raises
    ------
    ConfigError
        With the offending key path for schema violations.
    """
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        raise ConfigError("invalid configuration:\n  " + "\n  ".join(_describe(e) for e in errors))
    preset = doc["system"]["preset"]
    full = _merge(_merge(COMMON_DEFAULTS, PRESET_DEFAULTS[preset]), doc)
    # Cross-field checks the schema cannot express.
    lift = full["lift"]
    if lift["partition"] is not None and sum(lift["partition"]) != lift["N"]:
        raise ConfigError("lift/partition: entries must sum to lift/N")
    mpc = full.get("mpc")
    if mpc:
        ref = mpc.get("reference")
        if ref and len(ref["times"]) != len(ref["values"]):
            raise ConfigError("mpc/reference: times and values differ in length")
        if len(mpc.get("u_min", [])) != len(mpc.get("u_max", [])):
            raise ConfigError("mpc: u_min and u_max differ in length")
    ctrl = full["data"]["controlled"]
    if ctrl is not None:
        ctrl.setdefault("duration", 2.0)
        ctrl.setdefault("low", -1.0)
        ctrl.setdefault("high", 1.0)
        if ctrl["low"] > ctrl["high"]:
            raise ConfigError("data/controlled: low exceeds high")
    return full


def load(path, seed_override: Optional[int] = None) -> dict:
    """Read and validate a configuration file."""
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError:
        raise
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    full = validate(doc)
    if seed_override is not None:
        full["data"]["seed"] = int(seed_override)
    return full
