"""Command line entry point: ``ptcontrol <command> --config run.toml ...``.

Commands: build-pt, pt-info, propagate, landscape, optimize. Every output file
carries the configuration hash and the process-tensor hash; commands refuse
a tensor built for a different bath or discretisation unless ``--force``.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from . import process_tensor as ptmod
from .bath import eta_coefficients
from .config import RunConfig
from .container import write_atomic
from .dynamics import SystemHamiltonian, apply, bloch_vector, make_propagators
from .errors import ConfigError, PtControlError, ProvenanceError
from .optimize import TARGETS, Evaluator, differential_evolution, sweep2d
from .process_tensor import CouplingSpec, build_influence_tensors, build_process_tensor
from .pulse import drive_grid, shape

log = logging.getLogger("ptcontrol")


def default_threads() -> int:
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:
        return os.cpu_count() or 1


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    write_atomic(path, text.encode("utf-8"))


def _write_json(path: Path, obj) -> None:
    _write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _pt_path(args, cfg: RunConfig) -> Path:
    return Path(args.pt) if args.pt else cfg.default_pt_path()


def _load_pt(args, cfg: RunConfig):
    """Load the tensor and check that it was built for this configuration."""
    path = _pt_path(args, cfg)
    if not path.is_file():
        raise FileNotFoundError(f"process tensor {path} does not exist; run build-pt first")
    pt = ptmod.load(path)
    built_for = pt.metadata.get("pt_config_hash")
    if built_for != cfg.pt_config_hash():
        msg = (f"process tensor {path} was built for configuration {built_for}, "
               f"this run needs {cfg.pt_config_hash()}")
        if not args.force:
            raise ProvenanceError(msg + " (use --force to override)")
        log.warning("%s; continuing because of --force", msg)
    if pt.n_steps != cfg.n_steps or not np.isclose(pt.dt, cfg.dt, rtol=0, atol=1e-15):
        msg = f"process tensor has {pt.n_steps} steps of {pt.dt} ps, config asks {cfg.n_steps} of {cfg.dt}"
        if not args.force:
            raise ProvenanceError(msg)
        log.warning("%s; continuing because of --force", msg)
    return path, pt


def _provenance(cfg: RunConfig, pt) -> dict:
    return {"config_hash": cfg.config_hash(), "pt_hash": pt.digest(),
            "pt_config_hash": pt.metadata.get("pt_config_hash"), "version": __version__}


def _out(args, cfg: RunConfig, default_name: str) -> Path:
    return Path(args.out) if args.out else cfg.output_dir() / default_name


# -- commands --------------------------------------------------------------------

def cmd_build_pt(args, cfg: RunConfig) -> int:
    path = Path(args.out) if args.out else _pt_path(args, cfg)
    if path.exists() and not args.force:
        existing = ptmod.load(path)
        if existing.metadata.get("pt_config_hash") == cfg.pt_config_hash():
            print(f"{path}: up to date (pt hash {existing.digest()})")
            return 0
        raise ProvenanceError(f"{path} holds a tensor for another configuration; "
                              "use --force to overwrite")
    bath = cfg.bath()
    k = cfg.memory_steps
    log.info("building process tensor: %d steps of %g ps, memory %d steps",
             cfg.n_steps, cfg.dt, k)
    influences = build_influence_tensors(eta_coefficients(bath, cfg.dt, k),
                                         CouplingSpec.quantum_dot())
    meta = {"pt_config_hash": cfg.pt_config_hash(), "config": cfg.pt_hash_input(),
            "memory_steps": k}
    pt = build_process_tensor(influences, cfg.n_steps, cfg.policy(), cfg.max_bond_capacity,
                              meta, progress=True)
    path.parent.mkdir(parents=True, exist_ok=True)
    ptmod.save(pt, path)
    diag = dict(pt.metadata["diagnostics"])
    diag.pop("bond_dims")
    report = {"pt_path": str(path), "pt_hash": pt.digest(), "config_hash": cfg.config_hash(),
              "pt_config_hash": cfg.pt_config_hash(), "n_steps": pt.n_steps, "dt": pt.dt,
              "memory_steps": k, "diagnostics": diag}
    _write_json(Path(str(path) + ".report.json"), report)
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0


def cmd_pt_info(args, cfg: Optional[RunConfig]) -> int:
    if not args.pt and cfg is None:
        raise ConfigError("pt-info needs --pt or --config")
    path = Path(args.pt) if args.pt else cfg.default_pt_path()
    pt = ptmod.load(path)
    info = {"path": str(path), "pt_hash": pt.digest(), "n_steps": pt.n_steps, "dt": pt.dt,
            "d": pt.d, "max_bond": pt.max_bond, "metadata": pt.metadata}
    info["metadata"] = {k: v for k, v in pt.metadata.items() if k != "diagnostics"}
    info["diagnostics"] = {k: v for k, v in pt.metadata.get("diagnostics", {}).items()
                           if k != "bond_dims"}
    if cfg is not None:
        info["matches_config"] = pt.metadata.get("pt_config_hash") == cfg.pt_config_hash()
    print(json.dumps(info, indent=2, sort_keys=True))
    return 0


def _header(prov: dict) -> str:
    return "".join(f"# {k}={prov[k]}\n" for k in sorted(prov))


def cmd_propagate(args, cfg: RunConfig) -> int:
    _, pt = _load_pt(args, cfg)
    pulse, slm = cfg.pulse(), cfg.slm()
    ensemble = cfg.ensemble()
    field_mid = shape(pulse, slm, drive_grid(pt.n_steps, pt.dt))
    times = np.arange(pt.n_steps + 1) * pt.dt
    field_nodes = shape(pulse, slm, times)
    rho0 = TARGETS[cfg.section("ensemble")["initial_state"]]
    prov = _provenance(cfg, pt)
    out = _out(args, cfg, "trajectory.csv")
    several = len(ensemble.detunings) > 1
    for k, det in enumerate(ensemble.detunings):
        props = make_propagators(SystemHamiltonian.quantum_dot(det), field_mid, 0.0, pt.dt)
        traj = apply(pt, props, rho0)
        buf = io.StringIO()
        buf.write(_header({**prov, "detuning": det}))
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "sx", "sy", "sz", "re_E", "im_E"])
        for t, rho, e in zip(times, traj.states, field_nodes):
            sx, sy, sz = bloch_vector(rho)
            w.writerow([repr(float(t)), repr(float(sx)), repr(float(sy)), repr(float(sz)),
                        repr(float(e.real)), repr(float(e.imag))])
        path = out.with_name(f"{out.stem}_dot{k}{out.suffix}") if several else out
        _write_text(path, buf.getvalue())
        sz_end = bloch_vector(traj.states[-1])[2]
        print(f"{path}: detuning {det:g}/ps, final <sz> = {sz_end:.6f}, "
              f"trace error {traj.trace_error():.1e}")
    return 0


def cmd_landscape(args, cfg: RunConfig) -> int:
    path, pt = _load_pt(args, cfg)
    problem = cfg.problem("landscape")
    shape_ = tuple(cfg.section("landscape")["shape"])
    prov = _provenance(cfg, pt)
    with Evaluator(problem, pt=pt, pt_path=path, threads=args.threads) as ev:
        land = sweep2d(ev, shape_)
        failures = list(ev.failures)
    out = _out(args, cfg, "landscape.csv")
    buf = io.StringIO()
    buf.write(_header(prov))
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([*land.axes, "objective"])
    for i, u in enumerate(land.values[0]):
        for j, v in enumerate(land.values[1]):
            w.writerow([repr(float(u)), repr(float(v)), repr(float(land.objective[i, j]))])
    _write_text(out, buf.getvalue())
    minima = land.minima()
    sidecar = {**prov, "parameters": list(land.axes), "shape": list(shape_),
               "axes": [a.tolist() for a in land.values],
               "fixed": problem.space.base.to_dict(), "objective": problem.objective.to_dict(),
               "detunings": list(problem.ensemble.detunings),
               "minima": [{"index": [i, j], "point": [float(land.values[0][i]),
                                                      float(land.values[1][j])],
                           "value": float(land.objective[i, j])} for i, j in minima],
               "failures": [{"index": i, "error": e} for i, e in failures]}
    _write_json(out.with_suffix(".json"), sidecar)
    best = np.nanmin(land.objective) if np.isfinite(land.objective).any() else float("nan")
    print(f"{out}: {land.objective.size} points, best {best:.6g}, "
          f"{len(minima)} local minima, {len(failures)} failures")
    return 0


def cmd_optimize(args, cfg: RunConfig) -> int:
    path, pt = _load_pt(args, cfg)
    problem = cfg.problem("optimizer")
    de = cfg.de_config(seed=args.seed, budget_seconds=args.budget_seconds)
    prov = _provenance(cfg, pt)
    out = _out(args, cfg, "optimize.json")
    checkpoint = Path(args.checkpoint) if args.checkpoint else out.with_suffix(".checkpoint.json")
    check_prov = {"config_hash": prov["config_hash"], "pt_hash": prov["pt_hash"],
                  "seed": de.seed}
    with Evaluator(problem, pt=pt, pt_path=path, threads=args.threads) as ev:
        result = differential_evolution(
            ev, problem.space.bounds, de, checkpoint=checkpoint, provenance=check_prov,
            resume=args.resume, checkpoint_every=cfg.section("optimizer")["checkpoint_every"])
        failures = list(ev.failures)
    best_pulse = problem.space.to_pulse(result.best_x)
    best = {**prov, "seed": de.seed, "best_value": result.best_value,
            "parameters": dict(zip(problem.space.names, result.best_x.tolist())),
            "pulse": best_pulse.to_dict(), "evaluations": result.evaluations,
            "generations": result.generations, "stop_reason": result.stop_reason,
            "budget_exhausted": result.budget_exhausted, "objective": problem.objective.to_dict(),
            "detunings": list(problem.ensemble.detunings)}
    _write_json(out, best)
    _write_json(out.with_suffix(".history.json"),
                {**prov, "seed": de.seed, "history": result.history,
                 "failures": [{"index": i, "error": e} for i, e in failures]})
    print(f"{out}: best {result.best_value:.6g} after {result.evaluations} evaluations "
          f"({result.generations} generations, stop: {result.stop_reason})")
    return 0


COMMANDS = {"build-pt": cmd_build_pt, "pt-info": cmd_pt_info, "propagate": cmd_propagate,
            "landscape": cmd_landscape, "optimize": cmd_optimize}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ptcontrol", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="TOML run configuration")
        p.add_argument("--pt", help="process tensor file (default: cache path from the config)")
        p.add_argument("--out", help="output file")
        p.add_argument("--force", action="store_true",
                       help="accept mismatched artifacts / overwrite an existing tensor")
        p.add_argument("-v", "--verbose", action="count", default=0)
        if name in ("landscape", "optimize"):
            p.add_argument("--threads", type=int, default=default_threads(),
                           help="worker processes (default: available cores)")
        if name == "optimize":
            p.add_argument("--seed", type=int, default=None, help="override the config seed")
            p.add_argument("--budget-seconds", type=float, default=None,
                           help="wall-clock budget for the search")
            p.add_argument("--checkpoint", help="checkpoint file (default: next to --out)")
            p.add_argument("--resume", action="store_true",
                           help="continue from the checkpoint if it exists")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        if args.config is None and args.command != "pt-info":
            raise ConfigError(f"{args.command} needs --config")
        cfg = RunConfig.load(args.config) if args.config else None
        if getattr(args, "threads", 1) < 1:
            raise ConfigError("--threads must be >= 1")
        return COMMANDS[args.command](args, cfg)
    except PtControlError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
