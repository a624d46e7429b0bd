"""System Hamiltonians, Liouville-space propagators and reduced dynamics.

Basis ordering is (up, down); density matrices are vectorised row-major,
``vec(rho)[a * d + b] = rho[a, b]``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import container
from .bath import BathSpec, eta_coefficients
from .errors import ShapeError, ValidationError
from .process_tensor import (CouplingSpec, InfluenceSet, ProcessTensor, _column,
                             build_influence_tensors)
from .tensornet import MatrixProductState, TruncationPolicy, apply_mpo_column_and_compress

SIGMA_X = np.array([[0, 1], [1, 0]], dtype=complex)
SIGMA_Y = np.array([[0, -1j], [1j, 0]], dtype=complex)
SIGMA_Z = np.array([[1, 0], [0, -1]], dtype=complex)
SIGMA_PLUS = np.array([[0, 1], [0, 0]], dtype=complex)
SIGMA_MINUS = SIGMA_PLUS.T.copy()

UP = np.array([1, 0], dtype=complex)
DOWN = np.array([0, 1], dtype=complex)

HERMITIAN_TOL = 1e-12


def pure_state(psi) -> np.ndarray:
    psi = np.asarray(psi, dtype=complex)
    psi = psi / np.linalg.norm(psi)
    return np.outer(psi, psi.conj())


GROUND = pure_state(DOWN)
EXCITED = pure_state(UP)
Y_PLUS = pure_state((UP + 1j * DOWN) / np.sqrt(2))
Y_MINUS = pure_state((UP - 1j * DOWN) / np.sqrt(2))
X_PLUS = pure_state((UP + DOWN) / np.sqrt(2))


@dataclass(frozen=True)
class SystemHamiltonian:
    """H(E) = static + E/2 * drive_op + conj(E)/2 * drive_op^dagger.

    For a quantum dot in the frame rotating with the reference transition,
    ``static = detuning/2 * sigma_z`` and ``drive_op = sigma_plus``.
    """

    static: np.ndarray = field(default_factory=lambda: np.zeros((2, 2), dtype=complex))
    drive_op: np.ndarray = field(default_factory=lambda: SIGMA_PLUS.copy())

    @classmethod
    def quantum_dot(cls, detuning: float = 0.0) -> "SystemHamiltonian":
        """Dot whose transition lies ``detuning`` (1/ps) above the frame frequency."""
        return cls(static=0.5 * detuning * SIGMA_Z, drive_op=SIGMA_PLUS.copy())

    @property
    def d(self) -> int:
        return self.static.shape[0]

    def __call__(self, drive: complex) -> np.ndarray:
        return self.matrices(np.array([drive]))[0]

    def matrices(self, drive) -> np.ndarray:
        e = np.asarray(drive, dtype=complex).reshape(-1, 1, 1)
        op = np.asarray(self.drive_op, dtype=complex)
        h = np.asarray(self.static, dtype=complex) + 0.5 * e * op + 0.5 * e.conj() * op.conj().T
        err = np.max(np.abs(h - np.conj(np.swapaxes(h, 1, 2))), initial=0.0)
        if err > HERMITIAN_TOL:
            raise ValidationError(f"Hamiltonian sample is not Hermitian (deviation {err:.2e})")
        return h


@dataclass(frozen=True)
class PropagatorSequence:
    """``matrices[m]`` is exp(L_S(t0 + (m + 1/2) dt) dt) acting on vec(rho)."""

    matrices: np.ndarray
    dt: float
    t0: float = 0.0

    def __len__(self):
        return self.matrices.shape[0]


def unitary_superoperators(unitaries: np.ndarray) -> np.ndarray:
    """Batch of rho -> U rho U^dagger maps in the row-major vectorisation."""
    u = np.asarray(unitaries)
    n, d, _ = u.shape
    return np.einsum("nac,nbe->nabce", u, u.conj()).reshape(n, d * d, d * d)


def make_propagators(h: SystemHamiltonian, drive, t0: float, dt: float,
                     n: Optional[int] = None) -> PropagatorSequence:
    """Exact one-step propagators for drive samples taken at the step midpoints."""
    drive = np.asarray(drive, dtype=complex).reshape(-1)
    if n is None:
        n = drive.size
    if drive.size != n:
        raise ShapeError(f"expected {n} drive samples at the step midpoints, got {drive.size}")
    hs = h.matrices(drive)
    evals, vecs = np.linalg.eigh(hs)
    phases = np.exp(-1j * evals * dt)
    us = np.einsum("nij,nj,nkj->nik", vecs, phases, vecs.conj())
    return PropagatorSequence(unitary_superoperators(us), float(dt), float(t0))


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    field: Optional[np.ndarray] = None

    @property
    def d(self) -> int:
        return self.states.shape[1]

    @property
    def final_state(self) -> np.ndarray:
        return self.states[-1]

    def expectation(self, op) -> np.ndarray:
        return np.einsum("nij,ji->n", self.states, np.asarray(op)).real

    def bloch(self) -> np.ndarray:
        """Columns <sigma_x>, <sigma_y>, <sigma_z>."""
        return np.stack([self.expectation(SIGMA_X), self.expectation(SIGMA_Y),
                         self.expectation(SIGMA_Z)], axis=1)

    def trace_error(self) -> float:
        return float(np.max(np.abs(np.trace(self.states, axis1=1, axis2=2) - 1)))

    def min_eigenvalue(self) -> float:
        """Smallest eigenvalue over all steps; small negative values come
        from truncation and are reported rather than clipped."""
        herm = 0.5 * (self.states + np.conj(np.swapaxes(self.states, 1, 2)))
        return float(np.min(np.linalg.eigvalsh(herm)))

    def write_csv(self, path, extra_header: Optional[dict] = None) -> None:
        d = self.d
        with open(path, "w", newline="") as fh:
            for k, v in (extra_header or {}).items():
                fh.write(f"# {k}={v}\n")
            w = csv.writer(fh)
            cols = ["t"]
            for a in range(d):
                for b in range(d):
                    cols += [f"re_rho{a}{b}", f"im_rho{a}{b}"]
            if d == 2:
                cols += ["sx", "sy", "sz"]
            if self.field is not None:
                cols += ["re_E", "im_E"]
            w.writerow(cols)
            bloch = self.bloch() if d == 2 else None
            for m, t in enumerate(self.times):
                row = [repr(float(t))]
                for v in self.states[m].reshape(-1):
                    row += [repr(float(v.real)), repr(float(v.imag))]
                if bloch is not None:
                    row += [repr(float(x)) for x in bloch[m]]
                if self.field is not None:
                    row += [repr(float(self.field[m].real)), repr(float(self.field[m].imag))]
                w.writerow(row)

    _MAGIC = b"PTTRAJ\x00\n"

    def save(self, path, meta: Optional[dict] = None) -> None:
        arrays = [self.times.astype(complex), self.states]
        if self.field is not None:
            arrays.append(self.field)
        container.write_atomic(path, container.encode(self._MAGIC, dict(meta or {}), arrays))

    @classmethod
    def load(cls, path) -> "Trajectory":
        _, arrays = container.decode(Path(path).read_bytes(), cls._MAGIC, str(path))
        fld = arrays[2] if len(arrays) > 2 else None
        return cls(arrays[0].real.copy(), arrays[1], fld)


def _check_rho(rho0, d: int) -> np.ndarray:
    rho0 = np.asarray(rho0, dtype=complex)
    if rho0.shape != (d, d):
        raise ShapeError(f"initial state must be {d}x{d}, got {rho0.shape}")
    return rho0


def apply(pt: ProcessTensor, props: PropagatorSequence, rho0, final_only: bool = False) -> Trajectory:
    """Reduced dynamics from a prebuilt process tensor and a propagator sequence."""
    if len(props) != pt.n_steps:
        raise ShapeError(f"{len(props)} propagators for a {pt.n_steps}-step process tensor")
    d = pt.d
    if props.matrices.shape[1:] != (d * d, d * d):
        raise ShapeError("propagator dimension does not match the process tensor")
    rho0 = _check_rho(rho0, d)
    caps = None if final_only else pt.right_caps()
    n = pt.n_steps
    # x[alpha, bond]
    x = rho0.reshape(d * d, 1)
    states = [rho0.copy()] if not final_only else []
    for m in range(n):
        a = pt.tensors[m]
        y = np.einsum("al,lar->ar", x, a)
        x = props.matrices[m] @ y
        if not final_only:
            states.append((x @ caps[m + 1]).reshape(d, d))
    if final_only:
        states = [(x[:, 0]).reshape(d, d)]
        times = np.array([props.t0 + n * props.dt])
    else:
        times = props.t0 + props.dt * np.arange(n + 1)
    return Trajectory(times, np.array(states))


def conventional_tempo(h: SystemHamiltonian, drive, bath: Optional[BathSpec], rho0, dt: float,
                       n: int, policy: TruncationPolicy, memory_steps: Optional[int] = None,
                       coupling: Optional[CouplingSpec] = None,
                       influences: Optional[InfluenceSet] = None, t0: float = 0.0) -> Trajectory:
    """Reference TEMPO propagation with the system propagators inside the network.

    The augmented density tensor over the memory window is kept as an MPS
    whose last site carries the current state; each step multiplies in the
    influence of the new slot, appends the propagator and sums out the slot
    that has left the memory window. Everything is rebuilt per call unless
    ``influences`` is given.
    """
    coupling = coupling or CouplingSpec.quantum_dot()
    d = coupling.d
    if influences is None:
        k = n if memory_steps is None else memory_steps
        influences = build_influence_tensors(eta_coefficients(bath, dt, k), coupling)
    props = make_propagators(h, drive, t0, dt, n)
    rho0 = _check_rho(rho0, d)
    k_max = influences.n_max
    d2 = d * d
    ones = np.ones(d2)
    mps = MatrixProductState([rho0.reshape(1, d2, 1)], center=0)
    states = [rho0.copy()]
    for m in range(n):
        depth = min(m, k_max)
        col = _column(influences, depth)
        # the current site already exists: feed its state through the self factor
        last = col[-1]
        w = np.zeros((last.shape[0], d2, d2, 1), dtype=complex)
        idx = np.arange(d2)
        if depth:
            w[idx, idx, idx, 0] = influences.self_factor
        else:
            w[0, idx, idx, 0] = influences.self_factor
        col[-1] = w
        mps, _ = apply_mpo_column_and_compress(mps, col, policy, grow=False)
        # split the current site: it keeps alpha_m, a new site holds U_m alpha_m
        cur = mps.tensors[-1]
        split = np.einsum("la,ab->lab", cur[:, :, 0], np.eye(d2))
        mps.tensors[-1] = split
        mps.tensors.append(props.matrices[m].T.reshape(d2, d2, 1))
        # slot m - k_max has no influence on later slots any more
        if len(mps) > k_max + 1:
            v = np.tensordot(mps.tensors[0], ones, axes=([1], [0]))
            mps.tensors.pop(0)
            mps.tensors[0] = np.tensordot(v, mps.tensors[0], axes=([1], [0]))
            mps.center = 0 if mps.center == 0 else None
        env = np.ones(1, dtype=complex)
        for t in mps.tensors[:-1]:
            env = env @ np.tensordot(t, ones, axes=([1], [0]))
        vec = np.tensordot(env, mps.tensors[-1][:, :, 0], axes=([0], [0])) * np.exp(mps.log_scale)
        states.append(vec.reshape(d, d))
    times = t0 + dt * np.arange(n + 1)
    return Trajectory(times, np.array(states))


def trace_distance(rho, sigma) -> float:
    rho = np.asarray(rho, dtype=complex)
    sigma = np.asarray(sigma, dtype=complex)
    if rho.shape != sigma.shape:
        raise ShapeError("states must have equal dimensions")
    for m in (rho, sigma):
        if np.max(np.abs(m - m.conj().T)) > 1e-8:
            raise ValidationError("trace distance needs Hermitian inputs")
    diff = rho - sigma
    diff = 0.5 * (diff + diff.conj().T)
    return float(0.5 * np.sum(np.abs(np.linalg.eigvalsh(diff))))


def bloch_vector(rho) -> np.ndarray:
    rho = np.asarray(rho)
    return np.array([np.trace(rho @ s).real for s in (SIGMA_X, SIGMA_Y, SIGMA_Z)])
