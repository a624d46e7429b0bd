import math

import numpy as np
import pytest

from conftest import REF_BATH, build_pt
from ptcontrol import process_tensor as ptmod
from ptcontrol.bath import BathSpec
from ptcontrol.dynamics import GROUND, X_PLUS, Y_MINUS, Y_PLUS, pure_state
from ptcontrol.errors import ProvenanceError, ValidationError
from ptcontrol.optimize import (DeConfig, EnsembleSpec, Evaluator, FunctionEvaluator, Landscape,
                                Objective, ParameterSpace, Problem, differential_evolution,
                                equator_distance, evaluate, sweep2d)
from ptcontrol.pulse import PhaseMask, PulseSpec

N_STEPS, DT = 200, 0.01
PI_HALF = PulseSpec(tau=0.1, delta=0.0, theta=np.pi / 2, t_center=1.0)
ENSEMBLE = EnsembleSpec((-10.0, -5.0, 0.0, 5.0, 10.0))


@pytest.fixture(scope="module")
def free_small(tmp_path_factory):
    pt = build_pt(BathSpec(alpha=0.0), DT, N_STEPS, N_STEPS, 10**-6.5)
    path = tmp_path_factory.mktemp("opt") / "free.ptmps"
    ptmod.save(pt, path)
    return pt, path


@pytest.fixture(scope="module")
def coupled_small(tmp_path_factory):
    pt = build_pt(REF_BATH, DT, N_STEPS, 50, 10**-6.5)
    path = tmp_path_factory.mktemp("opt") / "coupled.ptmps"
    ptmod.save(pt, path)
    return pt, path


def delta_phi_space(base=None):
    base = base or PulseSpec(tau=0.1, theta=np.pi / 2, t_center=1.0,
                             mask=PhaseMask.parabola(0.0, -200.0))
    return ParameterSpace(("delta", "phi"), (-5.0, -np.pi), (5.0, np.pi), base)


def sphere(x):
    return float(np.sum(x**2))


def rosenbrock(x):
    return float(np.sum(100 * (x[1:] - x[:-1] ** 2) ** 2 + (1 - x[:-1]) ** 2))


def assert_monotone(history):
    best = [h["best"] for h in history]
    assert all(b <= a for a, b in zip(best, best[1:]))


# -- objectives ----------------------------------------------------------------

def test_pi_half_pulse_lands_on_y_plus(free_small):
    pt, _ = free_small
    space = ParameterSpace(("theta",), (0.0,), (np.pi,), PI_HALF)
    problem = Problem(space, objective=Objective("trace_distance", "y+"))
    assert evaluate(pt, [np.pi / 2], problem) < 1e-3


def test_ground_state_rms_equator_distance(free_small):
    pt, _ = free_small
    space = ParameterSpace(("theta",), (0.0,), (np.pi,), PI_HALF)
    problem = Problem(space, objective=Objective("rms_equator"))
    assert evaluate(pt, [0.0], problem) == pytest.approx(np.sqrt(2), abs=1e-12)


def test_equator_distance_vanishes_exactly_on_pure_equatorial_states(rng):
    for phase in rng.uniform(0, 2 * np.pi, 10):
        assert equator_distance(pure_state([1, np.exp(1j * phase)])) < 1e-12
    assert equator_distance(GROUND) == pytest.approx(np.sqrt(2))
    assert equator_distance(np.eye(2) / 2) == pytest.approx(1.0)
    assert equator_distance(0.9 * X_PLUS + 0.1 * np.eye(2) / 2) > 0.04
    tilted = pure_state([np.cos(0.6), np.sin(0.6)])
    assert equator_distance(tilted) > 0.1


def test_rms_over_dots():
    obj = Objective("rms_equator")
    assert obj([GROUND, X_PLUS]) == pytest.approx(1.0)
    assert Objective("trace_distance", "y-")([Y_MINUS, Y_PLUS]) == pytest.approx(np.sqrt(0.5))
    with pytest.raises(ValidationError):
        Objective("trace_distance", "nowhere")


def test_phi_shift_by_pi_swaps_y_targets(coupled_small):
    pt, _ = coupled_small
    space = delta_phi_space()
    to_plus = Problem(space, ENSEMBLE, Objective("trace_distance", "y+"))
    to_minus = Problem(space, ENSEMBLE, Objective("trace_distance", "y-"))
    for delta in (-4.0, 0.0, 3.0):
        a = to_plus.evaluate(pt, [delta, -np.pi / 2])
        b = to_minus.evaluate(pt, [delta, np.pi / 2])
        assert abs(a - b) < 1e-10


def test_parameter_space_mapping_and_validation():
    space = ParameterSpace(("tau", "slope_0", "slope_1"), (0.03, -1, -1), (0.3, 1, 1), PI_HALF)
    pulse = space.to_pulse([0.2, 0.5, -0.5])
    assert pulse.tau == 0.2 and pulse.mask.slopes == (0.5, -0.5)
    assert np.allclose(space.point_from_pulse(pulse), [0.2, 0.5, -0.5])
    with pytest.raises(ValidationError):
        ParameterSpace(("bogus",), (0,), (1,))
    with pytest.raises(ValidationError):
        ParameterSpace(("slope_1",), (0,), (1,))
    with pytest.raises(ValidationError):
        ParameterSpace(("phi", "slope_0"), (0, 0), (1, 1))
    with pytest.raises(ValidationError):
        ParameterSpace(("tau",), (1.0,), (0.5,))


def test_process_tensor_is_loaded_once_for_an_ensemble(coupled_small):
    _, path = coupled_small
    problem = Problem(delta_phi_space(), ENSEMBLE, Objective("rms_equator"))
    before = ptmod.load_count()
    ev = Evaluator(problem, pt_path=path)
    ev.map([[0.0, 0.0], [1.0, 0.5], [-2.0, 1.0]])
    assert ptmod.load_count() - before == 1


# -- landscape -----------------------------------------------------------------

def test_sweep_matches_pointwise_evaluation(coupled_small):
    pt, _ = coupled_small
    problem = Problem(delta_phi_space(), ENSEMBLE, Objective("trace_distance", "y+"))
    land = sweep2d(Evaluator(problem, pt=pt), (3, 3))
    assert land.objective.shape == (3, 3)
    for i, u in enumerate(land.values[0]):
        for j, v in enumerate(land.values[1]):
            assert land.objective[i, j] == problem.evaluate(pt, [u, v])
    again = sweep2d(Evaluator(problem, pt=pt), (3, 3))
    assert again.objective.tobytes() == land.objective.tobytes()


def test_failed_points_are_recorded_and_the_sweep_continues(free_small):
    pt, _ = free_small
    # tau = 5 fs is unresolved on the shaper grid and raises for the first row
    space = ParameterSpace(("tau", "theta"), (0.005, 0.0), (0.1, np.pi), PI_HALF)
    ev = Evaluator(Problem(space), pt=pt)
    land = sweep2d(ev, (3, 3))
    assert np.all(np.isnan(land.objective[0]))
    assert np.all(np.isfinite(land.objective[1:]))
    assert [i for i, _ in ev.failures] == [0, 1, 2]
    assert "SamplingError" in ev.failures[0][1]


def test_landscape_minima_with_periodic_axis():
    z = np.array([[0.5, 0.9, 0.1],
                  [0.9, 0.9, 0.9],
                  [0.2, 0.9, 0.9]])
    land = Landscape(("delta", "phi"), (np.arange(3), np.arange(3)), z)
    # along phi, (0, 0) and (0, 2) are neighbours; only the lower one survives
    assert land.minima() == [(0, 2), (2, 0)]
    assert land.minima(threshold=0.15) == [(0, 2)]
    flat = Landscape(("delta", "theta"), land.values, z)
    assert flat.minima() == [(0, 0), (0, 2), (2, 0)]


def test_sweep_needs_two_parameters(free_small):
    pt, _ = free_small
    space = ParameterSpace(("theta",), (0.0,), (np.pi,), PI_HALF)
    with pytest.raises(ValidationError):
        sweep2d(Evaluator(Problem(space), pt=pt), (3, 3))


# -- differential evolution ----------------------------------------------------

def test_de_solves_the_sphere():
    config = DeConfig(pop_per_dim=8, max_generations=200, seed=42)
    res = differential_evolution(FunctionEvaluator(sphere), [[-5, 5]] * 3, config)
    assert res.best_value < 1e-6
    assert res.evaluations == 24 * 201 and res.generations == 200
    assert_monotone(res.history)


def test_de_is_deterministic():
    config = DeConfig(max_generations=30, seed=3)
    a = differential_evolution(FunctionEvaluator(rosenbrock), [[-2, 2]] * 4, config)
    b = differential_evolution(FunctionEvaluator(rosenbrock), [[-2, 2]] * 4, config)
    assert a.history == b.history and a.best_x.tobytes() == b.best_x.tobytes()


def test_seeded_member_bounds_generation_zero(free_small):
    pt, _ = free_small
    space = ParameterSpace(("delta", "theta"), (-20.0, 0.0), (20.0, 4 * np.pi), PI_HALF)
    problem = Problem(space, ENSEMBLE, Objective("rms_equator"))
    baseline = problem.evaluate(pt, [0.0, np.pi / 2])
    config = DeConfig(pop_per_dim=4, max_generations=3, seed=1, seeded=((0.0, np.pi / 2),))
    res = differential_evolution(Evaluator(problem, pt=pt), space.bounds, config)
    assert res.history[0]["best"] <= baseline
    assert res.best_value <= baseline
    assert_monotone(res.history)


def test_de_budget_flags():
    config = DeConfig(pop_per_dim=4, max_generations=100, max_evaluations=50, seed=0)
    res = differential_evolution(FunctionEvaluator(sphere), [[-1, 1]] * 2, config)
    assert res.stop_reason == "max_evaluations" and res.budget_exhausted
    assert res.evaluations <= 50
    res = differential_evolution(FunctionEvaluator(sphere), [[-1, 1]] * 2,
                                 DeConfig(max_generations=50, tol=1e-3, seed=0))
    assert res.stop_reason in ("converged", "max_generations") and not res.budget_exhausted


def test_de_rejects_bad_settings():
    with pytest.raises(ValidationError):
        DeConfig(mutation=0.0)
    with pytest.raises(ValidationError):
        DeConfig(crossover=1.5)
    with pytest.raises(ValidationError):
        differential_evolution(FunctionEvaluator(sphere), [[1, 0]], DeConfig())
    with pytest.raises(ValidationError):
        differential_evolution(FunctionEvaluator(sphere), [[0, 1]],
                               DeConfig(seeded=((2.0,),), max_generations=1))


def test_failed_trials_never_win():
    def flaky(x):
        return math.nan if x[0] > 0 else float(x[0] ** 2)

    res = differential_evolution(FunctionEvaluator(flaky), [[-1, 1]],
                                 DeConfig(pop_per_dim=8, max_generations=20, seed=5))
    assert np.isfinite(res.best_value) and res.best_x[0] <= 0
    assert_monotone(res.history)


def test_checkpoint_resume_reproduces_the_uninterrupted_run(tmp_path):
    bounds = [[-2, 2]] * 3
    full = differential_evolution(FunctionEvaluator(rosenbrock), bounds,
                                  DeConfig(max_generations=12, seed=9))
    ckpt = tmp_path / "de.json"
    differential_evolution(FunctionEvaluator(rosenbrock), bounds,
                           DeConfig(max_generations=5, seed=9), checkpoint=ckpt)
    resumed = differential_evolution(FunctionEvaluator(rosenbrock), bounds,
                                     DeConfig(max_generations=12, seed=9), checkpoint=ckpt,
                                     resume=True)
    assert resumed.history == full.history
    assert resumed.best_x.tobytes() == full.best_x.tobytes()
    with pytest.raises(ProvenanceError):
        differential_evolution(FunctionEvaluator(rosenbrock), bounds,
                               DeConfig(max_generations=12, seed=10), checkpoint=ckpt, resume=True)


def test_four_workers_give_identical_results(coupled_small):
    pt, path = coupled_small
    problem = Problem(delta_phi_space(), ENSEMBLE, Objective("rms_equator"))
    points = [[d, p] for d in (-4.0, 0.0, 4.0) for p in (-2.0, 0.5, 3.0)]
    serial = Evaluator(problem, pt=pt).map(points)
    with Evaluator(problem, pt_path=path, threads=4) as ev:
        parallel = ev.map(points)
    assert serial.tobytes() == parallel.tobytes()
    config = DeConfig(pop_per_dim=3, max_generations=2, seed=2)
    one = differential_evolution(Evaluator(problem, pt=pt), problem.space.bounds, config)
    with Evaluator(problem, pt_path=path, threads=4) as ev:
        four = differential_evolution(ev, problem.space.bounds, config)
    assert one.history == four.history


def test_short_input_pulse_baseline_near_reference_value(reference_pt):
    """A 30 fs pi/2 pulse reaches an ensemble RMS close to 0.12; a narrowband
    245 fs pulse cannot cover the +-10 1/ps detunings and does much worse."""
    values = {}
    for tau in (0.03, 0.245):
        space = ParameterSpace(("tau",), (0.01,), (1.0,),
                               PulseSpec(tau=tau, theta=np.pi / 2, t_center=2.0))
        problem = Problem(space, ENSEMBLE, Objective("rms_equator"))
        values[tau] = problem.evaluate(reference_pt, [tau])
    assert values[0.03] == pytest.approx(0.12, abs=0.03)
    assert values[0.245] > values[0.03]
