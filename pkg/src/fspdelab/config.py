"""Experiment configuration: defaults, validation, canonical hashing.

Configs are nested key-value sections serialized as JSON.  Every run
records the hash of its fully merged configuration so outputs from
different configurations can never be aggregated together.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

EXPERIMENTS = ("classcheck", "simulate", "solve-u", "uniqueness", "galerkin",
               "nonexplosion", "harnack")

_BASE = {
    "spectrum": {"n_modes": 2, "coeff": 1.0, "power": 2.0, "trace_exponent": 0.4},
    "time": {"delay": 0.25, "horizon": 1.0, "grid_step": 1.0 / 128.0},
    "coefficients": {
        "drift": {"kind": "dini", "scale": 1.0, "delta": 1.0},
        "delay_drift": {"kind": "tanh", "beta": 0.3},
        "diffusion": {"kind": "diag", "q": 1.0},
    },
    "montecarlo": {"samples": 1000, "seed": 20240801},
    "output": {"directory": "out"},
}

_PER_EXPERIMENT = {
    "classcheck": {},
    "simulate": {},
    "solve-u": {
        "coefficients": {
            "drift": {"kind": "dini", "scale": 0.4, "delta": 1.0},
            "delay_drift": {"kind": "tanh", "beta": 0.3},
            "diffusion": {"kind": "diag", "q": 1.0},
        },
        "zvonkin": {"lambda_grid": [40.0, 80.0, 160.0], "time_steps": 12,
                    "nodes_per_dim": 11, "halfwidth": 3.0, "quad_panels": 8,
                    "quad_order": 6, "hermite_order": 7},
    },
    "uniqueness": {
        "coefficients": {
            "drift": {"kind": "dini", "scale": 1.0, "delta": 1.0},
            "delay_drift": {"kind": "shift", "beta": 0.4},
            "diffusion": {"kind": "state_diag", "q": 1.2, "amplitude": 0.8,
                          "frequency": 3.0},
        },
        "uniqueness": {"level": 5.0, "dt_exponents": [6, 7, 8, 9, 10],
                       "reference_exponent": 11, "paths": 64},
    },
    "galerkin": {
        "spectrum": {"n_modes": 32, "coeff": 1.0, "power": 2.0, "trace_exponent": 0.4},
        "coefficients": {
            "drift": {"kind": "dini", "scale": 1.0, "delta": 1.0},
            "delay_drift": {"kind": "shift", "beta": 0.4},
            "diffusion": {"kind": "diag", "q": 0.5},
        },
        "galerkin": {"mode_counts": [2, 4, 8, 16], "reference_modes": 32, "paths": 256},
    },
    "nonexplosion": {
        "coefficients": {
            "drift": {"kind": "linear", "rate": 1.0},
            "delay_drift": {"kind": "tanh", "beta": 0.3},
            "diffusion": {"kind": "diag", "q": 0.5},
        },
        "nonexplosion": {"paths": 1000, "comparison_margin": 0.5,
                         "negative_control": True, "control_start": 2.0,
                         "control_horizon": 3.0},
    },
    "harnack": {
        "time": {"delay": 0.25, "horizon": 0.5, "grid_step": 1.0 / 128.0},
        "coefficients": {
            "drift": {"kind": "dini", "scale": 0.4, "delta": 1.0},
            "delay_drift": {"kind": "tanh", "beta": 0.3},
            "diffusion": {"kind": "diag", "q": 1.0},
        },
        "montecarlo": {"samples": 10000, "seed": 20240801},
        "zvonkin": {"lambda_grid": [40.0, 80.0, 160.0], "time_steps": 12,
                    "nodes_per_dim": 11, "halfwidth": 3.0, "quad_panels": 8,
                    "quad_order": 6, "hermite_order": 7},
        "harnack": {"train_pairs": 10, "holdout_pairs": 10, "pair_scale": 0.4,
                    "power_factors": [1.1, 1.5, 2.0], "test_function": "exp_head"},
    },
}


def _merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for key, val in extra.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], val)
        else:
            out[key] = copy.deepcopy(val)
    return out


def to_jsonable(obj):
    """Recursively convert numpy scalars/arrays so json stays canonical."""
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return [to_jsonable(v) for v in obj.tolist()]
    return obj


def canonical_json(data) -> str:
    return json.dumps(to_jsonable(data), sort_keys=True, separators=(",", ":"))


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str
    data: dict

    @classmethod
    def defaults(cls, experiment: str, overrides: dict | None = None) -> "ExperimentConfig":
        if experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {experiment!r}; choose from {EXPERIMENTS}")
        data = _merge(_BASE, _PER_EXPERIMENT[experiment])
        if overrides:
            data = _merge(data, overrides)
        cfg = cls(experiment, data)
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, experiment: str, path: str, overrides: dict | None = None) -> "ExperimentConfig":
        try:
            with open(path, "r", encoding="utf-8") as fh:
                loaded = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
        merged = _merge(loaded, overrides or {})
        return cls.defaults(experiment, merged)

    def section(self, name: str) -> dict:
        return self.data.get(name, {})

    def hash(self) -> str:
        # the output location is volatile plumbing, not part of the experiment
        data = {k: v for k, v in self.data.items() if k != "output"}
        payload = canonical_json({"experiment": self.experiment, "data": data})
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()

    def validate(self) -> None:
        time = self.section("time")
        delay, horizon, dt = time.get("delay"), time.get("horizon"), time.get("grid_step")
        for field_name, val in (("time.delay", delay), ("time.horizon", horizon),
                                ("time.grid_step", dt)):
            if not isinstance(val, (int, float)) or val <= 0:
                raise ConfigError(f"{field_name} must be a positive number")
        for field_name, span in (("time.delay", delay), ("time.horizon", horizon)):
            ratio = span / dt
            if abs(ratio - round(ratio)) > 1e-9 * max(1.0, ratio):
                raise ConfigError(f"time.grid_step must divide {field_name}")
        samples = self.section("montecarlo").get("samples", 0)
        if samples < 100:
            raise ConfigError("montecarlo.samples must be at least 100")
        spec = self.section("spectrum")
        if not 0.0 < spec.get("trace_exponent", 0.4) < 1.0:
            raise ConfigError("spectrum.trace_exponent must lie in (0, 1)")
        if spec.get("n_modes", 0) < 1:
            raise ConfigError("spectrum.n_modes must be at least 1")
        if self.experiment == "harnack":
            if horizon <= delay:
                raise ConfigError("time.horizon must exceed time.delay for harnack runs")
            hsamples = self.section("harnack").get("samples", samples)
            if hsamples < 100:
                raise ConfigError("harnack.samples must be at least 100")
