"""Objectives over final states, 2-D landscape sweeps and differential evolution.

Every evaluation reuses one immutable process tensor. Parallel runs load the
tensor once per worker process and gather results by index, so the output
never depends on the number of workers or on completion order.
"""

from __future__ import annotations

import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import process_tensor as ptmod
from .container import write_atomic
from .dynamics import (GROUND, X_PLUS, Y_MINUS, Y_PLUS, EXCITED, SystemHamiltonian, apply,
                       bloch_vector, make_propagators, pure_state, trace_distance)
from .errors import EvaluationError, PtControlError, ProvenanceError, ValidationError
from .process_tensor import ProcessTensor
from .pulse import PhaseMask, PulseSpec, SlmSpec, drive_grid, shape

log = logging.getLogger(__name__)

TARGETS = {
    "y+": Y_PLUS,
    "y-": Y_MINUS,
    "x+": X_PLUS,
    "x-": pure_state(np.array([1, -1]) / np.sqrt(2)),
    "up": EXCITED,
    "down": GROUND,
}

TRACE_DISTANCE = "trace_distance"
RMS_EQUATOR = "rms_equator"


def equator_distance(rho) -> float:
    """Euclidean distance of the Bloch vector of ``rho`` to the unit equator circle."""
    x, y, z = bloch_vector(rho)
    return float(np.sqrt((1.0 - np.hypot(x, y)) ** 2 + z**2))


@dataclass(frozen=True)
class Objective:
    """``trace_distance`` to a named target state or ``rms_equator``.

    Over several dots both kinds report the root mean square of the per-dot
    value at the final time.
    """

    kind: str = TRACE_DISTANCE
    target: str = "y+"

    def __post_init__(self):
        if self.kind not in (TRACE_DISTANCE, RMS_EQUATOR):
            raise ValidationError(f"unknown objective {self.kind!r}")
        if self.kind == TRACE_DISTANCE and self.target not in TARGETS:
            raise ValidationError(f"unknown target state {self.target!r}; "
                                  f"choose from {sorted(TARGETS)}")

    def per_state(self, rho) -> float:
        if self.kind == RMS_EQUATOR:
            return equator_distance(rho)
        return trace_distance(rho, TARGETS[self.target])

    def __call__(self, final_states: Sequence[np.ndarray]) -> float:
        vals = np.array([self.per_state(r) for r in final_states])
        return float(np.sqrt(np.mean(vals**2)))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "target": self.target}


@dataclass(frozen=True)
class EnsembleSpec:
    """Dot detunings (1/ps) relative to the frame frequency; one shared PT."""

    detunings: tuple = (0.0,)

    def __post_init__(self):
        d = tuple(float(v) for v in self.detunings)
        if not d or not all(math.isfinite(v) for v in d):
            raise ValidationError("ensemble needs at least one finite detuning")
        object.__setattr__(self, "detunings", d)


PULSE_FIELDS = ("tau", "delta", "theta", "t_center")
MASK_FIELDS = ("phi", "curvature")


@dataclass(frozen=True)
class ParameterSpace:
    """Named bounded dimensions mapped onto a template pulse.

    Recognised names: ``tau``, ``delta``, ``theta``, ``t_center``; ``phi``
    and ``curvature`` (constant and x^2 coefficients of a polynomial mask);
    ``slope_0`` .. ``slope_{k-1}`` (segment mask slopes, all k present).
    Anything not named is taken from ``base``.
    """

    names: tuple
    lower: tuple
    upper: tuple
    base: PulseSpec = field(default_factory=PulseSpec)

    def __post_init__(self):
        names = tuple(str(n) for n in self.names)
        lo = np.asarray(self.lower, dtype=float)
        hi = np.asarray(self.upper, dtype=float)
        if len(set(names)) != len(names):
            raise ValidationError("duplicate parameter names")
        if not (lo.shape == hi.shape == (len(names),)):
            raise ValidationError("bounds must match the parameter names")
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))) or np.any(hi < lo):
            raise ValidationError("bounds must be finite with lower <= upper")
        slopes = sorted(n for n in names if n.startswith("slope_"))
        for n in names:
            if n not in PULSE_FIELDS + MASK_FIELDS and not n.startswith("slope_"):
                raise ValidationError(f"unknown parameter {n!r}")
        if slopes:
            expected = {f"slope_{k}" for k in range(len(slopes))}
            if set(slopes) != expected:
                raise ValidationError("slope parameters must be slope_0 .. slope_{k-1}")
            if any(n in names for n in MASK_FIELDS):
                raise ValidationError("segment slopes cannot be mixed with polynomial mask parameters")
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "lower", tuple(lo))
        object.__setattr__(self, "upper", tuple(hi))

    @property
    def dim(self) -> int:
        return len(self.names)

    @property
    def bounds(self) -> np.ndarray:
        return np.column_stack([self.lower, self.upper])

    def to_pulse(self, x) -> PulseSpec:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.dim,):
            raise ValidationError(f"expected a point with {self.dim} coordinates")
        values = dict(zip(self.names, (float(v) for v in x)))
        kw = {k: values[k] for k in PULSE_FIELDS if k in values}
        n_slopes = sum(1 for n in self.names if n.startswith("slope_"))
        if n_slopes:
            smooth = self.base.mask.smooth if self.base.mask.kind == "segments" else True
            kw["mask"] = PhaseMask.segments([values[f"slope_{k}"] for k in range(n_slopes)], smooth)
        elif any(n in values for n in MASK_FIELDS):
            mask = self.base.mask
            if mask.kind != "polynomial":
                raise ValidationError("phi/curvature need a polynomial template mask")
            c = list(mask.coefficients) + [0.0] * max(0, 3 - len(mask.coefficients))
            if "phi" in values:
                c[0] = values["phi"]
            if "curvature" in values:
                c[2] = values["curvature"]
            kw["mask"] = PhaseMask("polynomial", tuple(c))
        return self.base.replace(**kw)

    def point_from_pulse(self, pulse: PulseSpec) -> np.ndarray:
        """Coordinates of ``pulse`` in this space (used to seed populations)."""
        out = []
        for n in self.names:
            if n in PULSE_FIELDS:
                out.append(getattr(pulse, n))
            elif n.startswith("slope_"):
                k = int(n.split("_")[1])
                out.append(pulse.mask.slopes[k] if pulse.mask.kind == "segments" else 0.0)
            else:
                c = pulse.mask.coefficients if pulse.mask.kind == "polynomial" else ()
                i = 0 if n == "phi" else 2
                out.append(c[i] if i < len(c) else 0.0)
        return np.array(out, dtype=float)

    def to_dict(self) -> dict:
        return {"names": list(self.names), "lower": list(self.lower), "upper": list(self.upper),
                "base": self.base.to_dict()}


@dataclass(frozen=True)
class Problem:
    """Everything an evaluation needs apart from the process tensor."""

    space: ParameterSpace
    ensemble: EnsembleSpec = field(default_factory=EnsembleSpec)
    objective: Objective = field(default_factory=Objective)
    slm: SlmSpec = field(default_factory=SlmSpec)
    initial_state: str = "down"

    def final_states(self, pt: ProcessTensor, x) -> list[np.ndarray]:
        pulse = self.space.to_pulse(x)
        field_ = shape(pulse, self.slm, drive_grid(pt.n_steps, pt.dt))
        rho0 = TARGETS[self.initial_state]
        finals = []
        for det in self.ensemble.detunings:
            props = make_propagators(SystemHamiltonian.quantum_dot(det), field_, 0.0, pt.dt)
            finals.append(apply(pt, props, rho0, final_only=True).states[-1])
        return finals

    def evaluate(self, pt: ProcessTensor, x) -> float:
        value = self.objective(self.final_states(pt, x))
        if not math.isfinite(value):
            raise EvaluationError(f"non-finite objective at {list(np.asarray(x))}")
        return value


def evaluate(pt: ProcessTensor, params, problem: Problem) -> float:
    """Objective value of one parameter point."""
    return problem.evaluate(pt, params)


# -- worker pool ---------------------------------------------------------------

_worker_pt: Optional[ProcessTensor] = None
_worker_problem: Optional[Problem] = None


def _worker_init(pt_path: str, problem: Problem) -> None:
    global _worker_pt, _worker_problem
    _worker_pt = ptmod.load(pt_path)
    _worker_problem = problem


def _safe_eval(pt: ProcessTensor, problem: Problem, x):
    try:
        return problem.evaluate(pt, x), None
    except PtControlError as exc:
        return math.nan, f"{type(exc).__name__}: {exc}"


def _worker_eval(x):
    return _safe_eval(_worker_pt, _worker_problem, x)


class Evaluator:
    """Evaluates batches of points serially or on a process pool.

    With ``threads > 1`` a ``pt_path`` is required; each worker loads the
    tensor once. Failed points come back as NaN and are logged.
    """

    def __init__(self, problem: Problem, pt: Optional[ProcessTensor] = None,
                 pt_path=None, threads: int = 1):
        if threads < 1:
            raise ValidationError("threads must be >= 1")
        if pt is None and pt_path is None:
            raise ValidationError("need a process tensor or a path to one")
        self.problem = problem
        self.threads = int(threads)
        self.pt_path = None if pt_path is None else str(pt_path)
        self._pt = pt
        self._pool = None
        self.n_evaluations = 0
        self.failures: list[tuple[int, str]] = []

    @property
    def pt(self) -> ProcessTensor:
        if self._pt is None:
            self._pt = ptmod.load(self.pt_path)
        return self._pt

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    def map(self, points) -> np.ndarray:
        points = [np.asarray(p, dtype=float) for p in points]
        if self.threads > 1 and self.pt_path is not None and len(points) > 1:
            if self._pool is None:
                self._pool = ProcessPoolExecutor(self.threads, initializer=_worker_init,
                                                 initargs=(self.pt_path, self.problem))
            chunk = max(1, len(points) // (4 * self.threads))
            results = list(self._pool.map(_worker_eval, points, chunksize=chunk))
        else:
            pt = self.pt
            results = [_safe_eval(pt, self.problem, p) for p in points]
        values = np.empty(len(points))
        for i, (v, err) in enumerate(results):
            values[i] = v
            if err is not None:
                idx = self.n_evaluations + i
                self.failures.append((idx, err))
                log.warning("evaluation %d at %s failed: %s", idx, points[i].tolist(), err)
        self.n_evaluations += len(points)
        return values


class FunctionEvaluator:
    """Serial evaluator around a plain callable ``f(x) -> float``."""

    def __init__(self, func):
        self.func = func
        self.n_evaluations = 0

    def map(self, points) -> np.ndarray:
        out = np.array([float(self.func(np.asarray(p, dtype=float))) for p in points])
        self.n_evaluations += len(out)
        return out


# -- landscape -----------------------------------------------------------------

@dataclass
class Landscape:
    axes: tuple
    values: tuple
    objective: np.ndarray

    def minima(self, threshold: float = math.inf) -> list[tuple[int, int]]:
        """Grid points strictly below every finite 8-neighbour (and threshold).

        Neighbours along a periodic axis named ``phi`` wrap around.
        """
        z = self.objective
        n0, n1 = z.shape
        wrap = tuple(name == "phi" for name in self.axes)
        found = []
        for i in range(n0):
            for j in range(n1):
                v = z[i, j]
                if not np.isfinite(v) or v >= threshold:
                    continue
                ok = True
                for di in (-1, 0, 1):
                    for dj in (-1, 0, 1):
                        if di == dj == 0:
                            continue
                        a, b = i + di, j + dj
                        if wrap[0]:
                            a %= n0
                        if wrap[1]:
                            b %= n1
                        if not (0 <= a < n0 and 0 <= b < n1) or (a, b) == (i, j):
                            continue
                        if np.isfinite(z[a, b]) and z[a, b] <= v:
                            ok = False
                if ok:
                    found.append((i, j))
        return found


def sweep2d(evaluator: Evaluator, shape_: tuple[int, int]) -> Landscape:
    """Evaluate a row-major grid over the two dimensions of the problem's space.

    Axis values are ``linspace(lower, upper, n)`` per dimension. Failed
    points are NaN.
    """
    space = evaluator.problem.space
    if space.dim != 2:
        raise ValidationError("a landscape sweep needs exactly two free parameters")
    n0, n1 = (int(v) for v in shape_)
    if n0 < 2 or n1 < 2:
        raise ValidationError("landscape grid must be at least 2x2")
    a0 = np.linspace(space.lower[0], space.upper[0], n0)
    a1 = np.linspace(space.lower[1], space.upper[1], n1)
    points = [np.array([u, v]) for u in a0 for v in a1]
    values = evaluator.map(points).reshape(n0, n1)
    return Landscape(space.names, (a0, a1), values)


# -- differential evolution ----------------------------------------------------

@dataclass(frozen=True)
class DeConfig:
    """DE/rand/1/bin settings. Population = ``pop_per_dim * dim`` (at least 4).

    The run stops at the first of: ``max_generations``, ``max_evaluations``
    (a generation is only started if it fits entirely), ``budget_seconds``,
    or population spread ``std(fitness) <= tol * |mean(fitness)|``.
    """

    pop_per_dim: int = 8
    mutation: float = 0.7
    crossover: float = 0.9
    max_generations: int = 1000
    max_evaluations: Optional[int] = None
    budget_seconds: Optional[float] = None
    tol: float = 0.0
    seed: int = 0
    seeded: tuple = ()

    def __post_init__(self):
        if not 0 < self.mutation < 2:
            raise ValidationError("mutation factor must lie in (0, 2)")
        if not 0 <= self.crossover <= 1:
            raise ValidationError("crossover rate must lie in [0, 1]")
        if self.pop_per_dim < 1 or self.max_generations < 0:
            raise ValidationError("pop_per_dim must be >= 1 and max_generations >= 0")
        if self.tol < 0:
            raise ValidationError("tol must be >= 0")
        object.__setattr__(self, "seeded", tuple(tuple(float(v) for v in s) for s in self.seeded))

    def population_size(self, dim: int) -> int:
        return max(4, self.pop_per_dim * dim)

    def to_dict(self) -> dict:
        return {"pop_per_dim": self.pop_per_dim, "mutation": self.mutation,
                "crossover": self.crossover, "max_generations": self.max_generations,
                "max_evaluations": self.max_evaluations, "budget_seconds": self.budget_seconds,
                "tol": self.tol, "seed": self.seed, "seeded": [list(s) for s in self.seeded]}


@dataclass
class DeState:
    generation: int
    evaluations: int
    population: np.ndarray
    fitness: np.ndarray
    rng_state: dict
    history: list

    def to_dict(self) -> dict:
        return {"generation": self.generation, "evaluations": self.evaluations,
                "population": self.population.tolist(), "fitness": self.fitness.tolist(),
                "rng_state": self.rng_state, "history": self.history}

    @classmethod
    def from_dict(cls, d: dict) -> "DeState":
        return cls(int(d["generation"]), int(d["evaluations"]),
                   np.array(d["population"], dtype=float), np.array(d["fitness"], dtype=float),
                   d["rng_state"], list(d["history"]))


@dataclass
class DeResult:
    best_x: np.ndarray
    best_value: float
    history: list
    evaluations: int
    generations: int
    stop_reason: str
    budget_exhausted: bool


def _finite(values: np.ndarray) -> np.ndarray:
    # failed evaluations never win a selection
    return np.where(np.isfinite(values), values, np.inf)


def _history_entry(state: DeState) -> dict:
    i = int(np.argmin(state.fitness))
    return {"generation": state.generation, "evaluations": state.evaluations,
            "best": float(state.fitness[i]), "best_x": state.population[i].tolist()}


def _check_bounds(bounds) -> np.ndarray:
    b = np.asarray(bounds, dtype=float)
    if b.ndim != 2 or b.shape[1] != 2 or b.shape[0] < 1:
        raise ValidationError("bounds must be a (dim, 2) array")
    if not np.all(np.isfinite(b)) or np.any(b[:, 1] < b[:, 0]):
        raise ValidationError("bounds must be finite with lower <= upper")
    return b


def _init_state(evaluator, bounds: np.ndarray, config: DeConfig) -> DeState:
    dim = bounds.shape[0]
    n = config.population_size(dim)
    rng = np.random.default_rng(config.seed)
    lo, hi = bounds[:, 0], bounds[:, 1]
    pop = lo + rng.random((n, dim)) * (hi - lo)
    if len(config.seeded) > n:
        raise ValidationError("more seeded members than population slots")
    for k, s in enumerate(config.seeded):
        s = np.asarray(s, dtype=float)
        if s.shape != (dim,):
            raise ValidationError(f"seeded member {k} has {s.size} coordinates, expected {dim}")
        if np.any(s < lo) or np.any(s > hi):
            raise ValidationError(f"seeded member {k} lies outside the bounds")
        pop[k] = s
    fit = _finite(evaluator.map(pop))
    state = DeState(0, n, pop, fit, rng.bit_generator.state, [])
    state.history.append(_history_entry(state))
    return state


def _generation(evaluator, bounds: np.ndarray, config: DeConfig, state: DeState) -> DeState:
    lo, hi = bounds[:, 0], bounds[:, 1]
    rng = np.random.default_rng()
    rng.bit_generator.state = state.rng_state
    pop, fit = state.population, state.fitness
    n, dim = pop.shape
    trials = np.empty_like(pop)
    for i in range(n):
        others = rng.choice(n - 1, 3, replace=False)
        others[others >= i] += 1
        a, b, c = pop[others]
        mutant = a + config.mutation * (b - c)
        cross = rng.random(dim) < config.crossover
        cross[rng.integers(dim)] = True
        trials[i] = np.clip(np.where(cross, mutant, pop[i]), lo, hi)
    trial_fit = _finite(evaluator.map(trials))
    better = trial_fit <= fit
    new_pop = np.where(better[:, None], trials, pop)
    new_fit = np.where(better, trial_fit, fit)
    new = DeState(state.generation + 1, state.evaluations + n, new_pop, new_fit,
                  rng.bit_generator.state, state.history + [])
    new.history.append(_history_entry(new))
    return new


def save_checkpoint(path, state: DeState, provenance: dict) -> None:
    data = {"provenance": provenance, "state": state.to_dict()}
    write_atomic(path, json.dumps(data, sort_keys=True).encode("utf-8"))


def load_checkpoint(path, provenance: dict) -> DeState:
    data = json.loads(Path(path).read_text())
    if data.get("provenance") != provenance:
        raise ProvenanceError(f"checkpoint {path} was written for a different run "
                              f"({data.get('provenance')} != {provenance})")
    return DeState.from_dict(data["state"])


def _search_identity(config: DeConfig) -> dict:
    # settings that shape the search path; stopping rules may change on resume
    d = config.to_dict()
    for key in ("max_generations", "max_evaluations", "budget_seconds", "tol"):
        d.pop(key)
    return d


def differential_evolution(evaluator, bounds, config: DeConfig, checkpoint=None,
                           provenance: Optional[dict] = None, resume: bool = False,
                           progress_every: int = 1, checkpoint_every: int = 1) -> DeResult:
    """Minimise with DE/rand/1/bin inside ``bounds`` (a ``(dim, 2)`` array).

    ``evaluator.map(points)`` returns one objective value per point (NaN
    for a failed point, which never wins a selection).
    All trial vectors of a generation are drawn before any is evaluated, so
    results are independent of the worker count. With ``checkpoint`` the
    full state (population, fitness, RNG state, history) is written
    atomically every ``checkpoint_every`` generations and when the run
    stops; ``resume`` continues from it and reproduces the uninterrupted run
    exactly. Stopping rules may differ between the original and the resumed
    run.
    """
    if checkpoint_every < 1:
        raise ValidationError("checkpoint_every must be >= 1")
    provenance = dict(provenance or {})
    provenance.setdefault("de", _search_identity(config))
    bounds = _check_bounds(bounds)
    provenance.setdefault("bounds", bounds.tolist())
    start = time.monotonic()
    state = None
    if resume and checkpoint is not None and os.path.exists(checkpoint):
        state = load_checkpoint(checkpoint, provenance)
        log.info("resumed at generation %d (%d evaluations)", state.generation, state.evaluations)
    if state is None:
        state = _init_state(evaluator, bounds, config)
        if checkpoint is not None:
            save_checkpoint(checkpoint, state, provenance)
    n = state.population.shape[0]
    reason, exhausted = "max_generations", False
    while True:
        if state.generation >= config.max_generations:
            reason = "max_generations"
            break
        if config.max_evaluations is not None and state.evaluations + n > config.max_evaluations:
            reason, exhausted = "max_evaluations", True
            break
        if config.budget_seconds is not None and time.monotonic() - start > config.budget_seconds:
            reason, exhausted = "budget_seconds", True
            break
        f = state.fitness
        if config.tol > 0 and np.all(np.isfinite(f)) and np.std(f) <= config.tol * abs(np.mean(f)):
            reason = "converged"
            break
        state = _generation(evaluator, bounds, config, state)
        if checkpoint is not None and state.generation % checkpoint_every == 0:
            save_checkpoint(checkpoint, state, provenance)
        if progress_every and state.generation % progress_every == 0:
            log.info("generation %d: best %.6g after %d evaluations",
                     state.generation, state.history[-1]["best"], state.evaluations)
    if checkpoint is not None:
        save_checkpoint(checkpoint, state, provenance)
    i = int(np.argmin(state.fitness))
    return DeResult(state.population[i].copy(), float(state.fitness[i]), state.history,
                    state.evaluations, state.generation, reason, exhausted)
