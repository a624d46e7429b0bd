"""Run configuration: one TOML file with flat sections.

Unknown sections or keys are rejected. ``config_hash`` covers every setting
that can change a result; ``pt_hash_input`` covers only the settings the
process tensor depends on, so one cached tensor serves many pulse studies.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .bath import BathSpec
from .errors import ConfigError, PtControlError
from .optimize import DeConfig, EnsembleSpec, Objective, ParameterSpace, Problem, TARGETS
from .pulse import PhaseMask, PulseSpec, SlmSpec
from .tensornet import TruncationPolicy

CACHE_ENV = "PTCONTROL_CACHE_DIR"

DEFAULTS = {
    "seed": 0,
    "bath": {"alpha": 0.126, "omega_c": 3.04, "temperature": 1.0},
    "discretization": {"dt": 0.01, "n_steps": 500, "memory_time": 2.5,
                       "cutoff_exponent": -6.5, "max_bond": 0, "max_bond_capacity": 0},
    "pulse": {"tau": 0.1, "delta": 0.0, "theta": math.pi / 2, "t_center": 2.0},
    "mask": {"kind": "polynomial", "coefficients": [0.0], "slopes": [], "smooth": True},
    "slm": {"n_pixels": 512, "span": 2 * math.pi * 128, "spot_pixels": 2.0},
    "ensemble": {"detunings": [0.0], "initial_state": "down"},
    "objective": {"kind": "trace_distance", "target": "y+"},
    "landscape": {"parameters": ["delta", "phi"], "lower": [-50.0, -math.pi],
                  "upper": [50.0, math.pi], "shape": [21, 9]},
    "optimizer": {"parameters": ["tau", "delta", "theta"], "lower": [0.03, -20.0, 0.0],
                  "upper": [0.3, 20.0, 2 * math.pi], "n_segments": 0, "slope_bound": 0.0,
                  "pop_per_dim": 8, "mutation": 0.7, "crossover": 0.9,
                  "max_generations": 1000, "max_evaluations": 0, "budget_seconds": 0.0,
                  "tol": 0.0, "seed_base_pulse": True, "checkpoint_every": 1},
    "paths": {"pt_cache": "", "output_dir": "."},
}

# sections that do not influence any numerical result
_NON_RESULT = ("paths",)
_PT_SECTIONS = ("bath", "discretization")


def _merge(defaults: dict, given: dict, where: str) -> dict:
    out = copy.deepcopy(defaults)
    for key, value in given.items():
        name = f"{where}.{key}" if where else key
        if key not in defaults:
            raise ConfigError(f"unknown configuration key {name!r}")
        if isinstance(defaults[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{name!r} must be a table")
            out[key] = _merge(defaults[key], value, name)
        else:
            out[key] = _coerce(defaults[key], value, name)
    return out


def _coerce(default, value, name):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{name!r} must be true or false")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{name!r} must be an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name!r} must be a number")
        if not math.isfinite(value):
            raise ConfigError(f"{name!r} must be finite")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{name!r} must be a string")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{name!r} must be an array")
        return list(value)
    raise ConfigError(f"cannot interpret {name!r}")


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode("utf-8")).hexdigest()


@dataclass
class RunConfig:
    """Validated configuration. ``data`` holds every section with defaults
    filled in; ``base_dir`` resolves relative paths."""

    data: dict
    base_dir: Path

    @classmethod
    def from_dict(cls, raw: dict, base_dir=".") -> "RunConfig":
        cfg = cls(_merge(DEFAULTS, raw, ""), Path(base_dir))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"configuration file {path} does not exist")
        try:
            raw = tomllib.loads(path.read_text())
        except (tomllib.TOMLDecodeError, UnicodeDecodeError) as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        return cls.from_dict(raw, path.parent)

    def section(self, name: str) -> dict:
        return self.data[name]

    # -- derived objects -------------------------------------------------------

    def validate(self) -> None:
        try:
            self.bath()
            self.policy()
            self.pulse()
            self.slm()
            self.problem("landscape")
            self.problem("optimizer")
            self.de_config(with_seed_member=False)
        except ConfigError:
            raise
        except (PtControlError, TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        d = self.section("discretization")
        if not d["dt"] > 0:
            raise ConfigError("discretization.dt must be positive")
        if d["n_steps"] < 1:
            raise ConfigError("discretization.n_steps must be >= 1")
        if d["memory_time"] < 0:
            raise ConfigError("discretization.memory_time must be >= 0")
        if d["max_bond"] < 0 or d["max_bond_capacity"] < 0:
            raise ConfigError("bond limits must be >= 0 (0 means unlimited)")
        shape = self.section("landscape")["shape"]
        if len(shape) != 2 or not all(isinstance(n, int) and n >= 2 for n in shape):
            raise ConfigError("landscape.shape must be two integers >= 2")
        if self.section("optimizer")["checkpoint_every"] < 1:
            raise ConfigError("optimizer.checkpoint_every must be >= 1")
        if self.section("ensemble")["initial_state"] not in TARGETS:
            raise ConfigError(f"ensemble.initial_state must be one of {sorted(TARGETS)}")

    def bath(self) -> BathSpec:
        b = self.section("bath")
        return BathSpec(alpha=b["alpha"], omega_c=b["omega_c"], temperature=b["temperature"])

    @property
    def dt(self) -> float:
        return self.section("discretization")["dt"]

    @property
    def n_steps(self) -> int:
        return self.section("discretization")["n_steps"]

    @property
    def memory_steps(self) -> int:
        """Influence range in steps, at most ``n_steps - 1``."""
        d = self.section("discretization")
        return min(int(round(d["memory_time"] / d["dt"])), d["n_steps"] - 1)

    def policy(self) -> TruncationPolicy:
        d = self.section("discretization")
        return TruncationPolicy(10.0 ** d["cutoff_exponent"], d["max_bond"] or None)

    @property
    def max_bond_capacity(self) -> Optional[int]:
        return self.section("discretization")["max_bond_capacity"] or None

    def pulse(self) -> PulseSpec:
        p = self.section("pulse")
        m = self.section("mask")
        if m["kind"] == "polynomial":
            mask = PhaseMask("polynomial", tuple(m["coefficients"]))
        elif m["kind"] == "segments":
            mask = PhaseMask.segments(m["slopes"], m["smooth"])
        else:
            raise ConfigError(f"mask.kind must be 'polynomial' or 'segments', got {m['kind']!r}")
        return PulseSpec(p["tau"], p["delta"], p["theta"], mask, p["t_center"])

    def slm(self) -> SlmSpec:
        s = self.section("slm")
        return SlmSpec(s["n_pixels"], s["span"], s["spot_pixels"])

    def ensemble(self) -> EnsembleSpec:
        return EnsembleSpec(tuple(self.section("ensemble")["detunings"]))

    def objective(self) -> Objective:
        o = self.section("objective")
        return Objective(o["kind"], o["target"])

    def space(self, which: str) -> ParameterSpace:
        s = self.section(which)
        names, lo, hi = list(s["parameters"]), list(s["lower"]), list(s["upper"])
        if not (len(names) == len(lo) == len(hi)):
            raise ConfigError(f"{which}: parameters, lower and upper must have equal length")
        if which == "optimizer" and s["n_segments"] > 0:
            bound = s["slope_bound"]
            if not bound > 0:
                raise ConfigError("optimizer.slope_bound must be positive with n_segments")
            names += [f"slope_{k}" for k in range(s["n_segments"])]
            lo += [-bound] * s["n_segments"]
            hi += [bound] * s["n_segments"]
        return ParameterSpace(tuple(names), tuple(lo), tuple(hi), self.pulse())

    def problem(self, which: str) -> Problem:
        return Problem(self.space(which), self.ensemble(), self.objective(), self.slm(),
                       self.section("ensemble")["initial_state"])

    def de_config(self, seed: Optional[int] = None,
                  budget_seconds: Optional[float] = None,
                  with_seed_member: bool = True) -> DeConfig:
        """DE settings; with ``seed_base_pulse`` the [pulse] section becomes the
        first population member."""
        o = self.section("optimizer")
        seeded = ()
        if o["seed_base_pulse"] and with_seed_member:
            space = self.space("optimizer")
            point = space.point_from_pulse(self.pulse())
            b = space.bounds
            if np.any(point < b[:, 0]) or np.any(point > b[:, 1]):
                raise ConfigError("the [pulse] section lies outside the optimizer bounds "
                                  "and cannot seed the population")
            seeded = (tuple(point),)
        budget = budget_seconds if budget_seconds is not None else (o["budget_seconds"] or None)
        return DeConfig(pop_per_dim=o["pop_per_dim"], mutation=o["mutation"],
                        crossover=o["crossover"], max_generations=o["max_generations"],
                        max_evaluations=o["max_evaluations"] or None, budget_seconds=budget,
                        tol=o["tol"], seed=self.data["seed"] if seed is None else seed,
                        seeded=seeded)

    # -- hashes and paths ----------------------------------------------------

    def result_dict(self) -> dict:
        return {k: v for k, v in self.data.items() if k not in _NON_RESULT}

    def config_hash(self) -> str:
        return _digest(self.result_dict())

    def pt_hash_input(self) -> dict:
        return {k: self.data[k] for k in _PT_SECTIONS}

    def pt_config_hash(self) -> str:
        return _digest(self.pt_hash_input())

    def resolve(self, value: str) -> Path:
        p = Path(value).expanduser()
        return p if p.is_absolute() else self.base_dir / p

    def cache_dir(self) -> Path:
        env = os.environ.get(CACHE_ENV)
        if env:
            return Path(env)
        value = self.section("paths")["pt_cache"]
        if value:
            return self.resolve(value)
        return Path.home() / ".cache" / "ptcontrol"

    def default_pt_path(self) -> Path:
        return self.cache_dir() / f"pt-{self.pt_config_hash()[:16]}.ptmps"

    def output_dir(self) -> Path:
        return self.resolve(self.section("paths")["output_dir"])
