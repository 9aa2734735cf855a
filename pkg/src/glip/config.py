"""
Experiment configuration: JSON schema, defaults and normalization.
"""

from __future__ import annotations

import copy
import json
from pathlib import Path

import jsonschema
import numpy as np

SCENARIOS = (
    "WellPosedGaussian",
    "IllPosedGaussian",
    "WellPosedPoisson",
    "IllPosedPoisson",
    "GridVolterra",
    "SpectralPoisson",
    "SpectralGaussian",
    "BoundaryPoisson",
    "BoundaryExponential",
    "Custom",
)

#: scenarios whose output feeds a slope fit
SLOPE_SCENARIOS = tuple(s for s in SCENARIOS if s not in ("BoundaryPoisson", "Custom"))
MIN_SLOPE_REPLICATES = 50

DEFAULT_TAUS = np.geomspace(1e-2, 1e-5, 6).tolist()

_pos = {"type": "number", "exclusiveMinimum": 0}

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["scenario"],
    "properties": {
        "scenario": {"enum": list(SCENARIOS)},
        "taus": {"type": "array", "items": _pos, "minItems": 1},
        "gamma_rule": {
            "type": "object",
            "additionalProperties": False,
            "required": ["kind"],
            "properties": {
                "kind": {"enum": ["constant", "ill-posed", "spectral"]},
                "gamma": _pos,
            },
        },
        "replicates": {"type": "integer", "minimum": 1},
        "inner_draws": {"type": "integer", "minimum": 100},
        "seed": {"type": "integer", "minimum": 0},
        "params": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "alpha": _pos,
                "beta": _pos,
                "kappa": _pos,
                "p": {"type": "integer", "minimum": 1},
                "n": {"type": "integer", "minimum": 1},
                "sigma2": _pos,
                "rate": _pos,
            },
        },
        "sampler": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "burn_in": {"type": "integer", "minimum": 0},
                "thin": {"type": "integer", "minimum": 1},
            },
        },
        "delta": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "alpha": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 3},
                "a": _pos,
            },
        },
        "model": {
            "type": "object",
            "additionalProperties": False,
            "required": ["noise", "operator", "x_true"],
            "properties": {
                "noise": {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["kind"],
                    "properties": {
                        "kind": {"enum": ["gaussian", "scaled_poisson", "gamma", "shifted_exponential"]},
                        "shape": {"oneOf": [_pos, {"type": "array", "items": _pos}]},
                    },
                },
                "operator": {
                    "type": "object",
                    "required": ["kind"],
                    "properties": {"kind": {"enum": ["dense", "spectral", "grid"]}},
                },
                "prior": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "precision": {"oneOf": [_pos, {"type": "array", "items": {"type": "number"}}, {"const": "sobolev"}]},
                        "kappa": _pos,
                        "mean": {"oneOf": [{"type": "number"}, {"type": "array", "items": {"type": "number"}}]},
                    },
                },
                "x_true": {"type": "array", "items": {"type": "number"}, "minItems": 1},
                "domain": {"enum": ["reals", "nonneg"]},
                "link": {"enum": ["identity", "exp"]},
            },
        },
        "evaluate_tail": {"type": "boolean"},
        "output": {"type": "string"},
        "verbosity": {"type": "integer", "minimum": 0},
    },
}

_DEFAULT_PARAMS = {
    "GridVolterra": {"p": 10, "n": 10, "sigma2": 1.0},
    "SpectralPoisson": {"alpha": 1.0, "beta": 1.0, "p": 100},
    "SpectralGaussian": {"alpha": 1.0, "beta": 1.0, "p": 100, "sigma2": 1.0},
    "BoundaryExponential": {"rate": 1.0, "p": 1},
}

_DEFAULT_GAMMA = {
    "IllPosedGaussian": {"kind": "ill-posed"},
    "IllPosedPoisson": {"kind": "ill-posed"},
    "SpectralPoisson": {"kind": "spectral"},
    "SpectralGaussian": {"kind": "spectral"},
}


class ConfigError(ValueError):
    """Invalid experiment configuration."""


def normalize(raw: dict) -> dict:
    """Validate ``raw`` and fill in every default.

    The result is a fixed point: ``normalize(normalize(c)) == normalize(c)``.
    """
    try:
        jsonschema.validate(raw, SCHEMA)
    except jsonschema.ValidationError as exc:
        path = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"{path}: {exc.message}") from None
    cfg = copy.deepcopy(raw)
    name = cfg["scenario"]
    cfg.setdefault("taus", list(DEFAULT_TAUS))
    cfg["taus"] = [float(t) for t in cfg["taus"]]
    cfg.setdefault("gamma_rule", dict(_DEFAULT_GAMMA.get(name, {"kind": "constant"})))
    if cfg["gamma_rule"]["kind"] == "constant":
        cfg["gamma_rule"].setdefault("gamma", 1.0)
    cfg.setdefault("replicates", 200)
    cfg.setdefault("inner_draws", 2000)
    cfg.setdefault("seed", 0)
    params = dict(_DEFAULT_PARAMS.get(name, {}))
    params.update(cfg.get("params", {}))
    if name.startswith("Spectral"):
        params.setdefault("kappa", params["beta"])
    cfg["params"] = params
    sampler = {"burn_in": 1000, "thin": 2}
    sampler.update(cfg.get("sampler", {}))
    cfg["sampler"] = sampler
    delta = {"alpha": 2.0, "a": 1.0}
    delta.update(cfg.get("delta", {}))
    cfg["delta"] = delta
    if "model" in cfg:
        model = cfg["model"]
        model.setdefault("prior", {})
        model["prior"].setdefault("precision", 1.0)
        model.setdefault("domain", "reals")
        model.setdefault("link", "identity")
        noise = model["noise"]
        noise.setdefault("shape", 1.0)
    cfg.setdefault("evaluate_tail", False)
    cfg.setdefault("verbosity", 0)
    _check_semantics(cfg)
    return cfg


def _check_semantics(cfg):
    taus = cfg["taus"]
    if any(b >= a for a, b in zip(taus, taus[1:])):
        raise ConfigError("taus must be strictly decreasing")
    if any(t >= 0.3 for t in taus):
        raise ConfigError("every tau must be below 0.3 (the schedules need tau < 1/e)")
    if cfg["scenario"] in SLOPE_SCENARIOS and cfg["replicates"] < MIN_SLOPE_REPLICATES:
        raise ConfigError(f"{cfg['scenario']} needs at least {MIN_SLOPE_REPLICATES} replicates")
    if (cfg["scenario"] == "Custom") != ("model" in cfg):
        raise ConfigError("a model block is required for, and only allowed with, the Custom scenario")
    kind = cfg["gamma_rule"]["kind"]
    if kind == "spectral" and not cfg["scenario"].startswith("Spectral"):
        raise ConfigError("the spectral gamma rule applies only to spectral scenarios")


def load(path) -> dict:
    """Read and normalize a JSON config file."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON in {path}: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    return normalize(raw)


def dump(cfg: dict) -> str:
    return json.dumps(cfg, indent=2, sort_keys=True)
