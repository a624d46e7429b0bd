"""Influence functionals, process-tensor construction and the PT file format.

The process tensor is stored as an MPS with one site per time slot. The
influence of a diagonal coupling operator is diagonal in Liouville space, so
each site keeps a single Liouville leg ``(left, alpha, right)``; the rank-4
``(left, out, in, right)`` view with ``out == in`` is available through
:meth:`ProcessTensor.site`.
"""

from __future__ import annotations

import hashlib
import logging
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import container
from .bath import EtaCoefficients
from .errors import CapacityError, ShapeError, UnsupportedConfigurationError, ValidationError
from .tensornet import MatrixProductState, TruncationPolicy, apply_mpo_column_and_compress

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CouplingSpec:
    """Eigenvalues of a coupling operator that is diagonal in the system basis."""

    eigenvalues: tuple

    def __post_init__(self):
        ev = tuple(float(v) for v in self.eigenvalues)
        if len(ev) < 1:
            raise ValidationError("coupling needs at least one eigenvalue")
        object.__setattr__(self, "eigenvalues", ev)

    @property
    def d(self) -> int:
        return len(self.eigenvalues)

    @classmethod
    def from_operator(cls, op) -> "CouplingSpec":
        op = np.asarray(op, dtype=complex)
        if op.ndim != 2 or op.shape[0] != op.shape[1]:
            raise ShapeError("coupling operator must be a square matrix")
        off = op - np.diag(np.diag(op))
        if np.max(np.abs(off), initial=0.0) > 1e-12:
            raise UnsupportedConfigurationError(
                "coupling operator must be diagonal in the system basis")
        if np.max(np.abs(np.diag(op).imag), initial=0.0) > 1e-12:
            raise ValidationError("coupling operator must be Hermitian")
        return cls(tuple(np.diag(op).real))

    @classmethod
    def quantum_dot(cls) -> "CouplingSpec":
        # sigma_z / 2 in the basis (up, down)
        return cls((0.5, -0.5))


@dataclass(frozen=True)
class InfluenceSet:
    """``tensors[n][alpha, beta]`` couples the later slot (alpha) to the slot
    ``n`` steps earlier (beta). ``tensors[0]`` is diagonal."""

    dt: float
    n_max: int
    tensors: np.ndarray

    @property
    def d2(self) -> int:
        return self.tensors.shape[1]

    @property
    def self_factor(self) -> np.ndarray:
        return np.diag(self.tensors[0])


def build_influence_tensors(eta: EtaCoefficients, coupling: CouplingSpec) -> InfluenceSet:
    """Discretised Feynman-Vernon influence functionals.

    For Liouville indices alpha = (a+, a-) (later) and beta = (b+, b-):
    I_n[alpha, beta] = exp(-(s_a+ - s_a-) (eta_n s_b+ - conj(eta_n) s_b-)),
    I_0[alpha, alpha] = exp(-(s_a+ - s_a-) (eta_0 s_a+ - conj(eta_0) s_a-)).
    """
    s = np.asarray(coupling.eigenvalues)
    d = s.size
    s_plus = np.repeat(s, d)       # ket index of alpha = a+ * d + a-
    s_minus = np.tile(s, d)
    diff = s_plus - s_minus
    e = eta.eta
    tensors = np.empty((eta.n_max + 1, d * d, d * d), dtype=complex)
    tensors[1:] = np.exp(-diff[None, :, None] * (e[1:, None, None] * s_plus[None, None, :]
                                                 - np.conj(e[1:, None, None]) * s_minus[None, None, :]))
    tensors[0] = np.diag(np.exp(-diff * (e[0] * s_plus - np.conj(e[0]) * s_minus)))
    return InfluenceSet(eta.dt, eta.n_max, tensors)


@dataclass
class BuildDiagnostics:
    max_bond: int = 1
    truncation_error: float = 0.0
    causality_correction: float = 0.0
    wall_time: float = 0.0
    bond_dims: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"max_bond": self.max_bond, "truncation_error": self.truncation_error,
                "causality_correction": self.causality_correction,
                "wall_time": self.wall_time, "bond_dims": list(self.bond_dims)}


class ProcessTensor:
    """Hamiltonian-independent multi-time map of the environment.

    ``tensors[m]`` has legs ``(left, alpha, right)`` for time slot ``m``;
    the physical scale ``exp(log_scale)`` has already been spread over the
    sites.
    """

    def __init__(self, tensors: Sequence[np.ndarray], dt: float, d: int,
                 metadata: Optional[dict] = None):
        self.tensors = [np.ascontiguousarray(t, dtype=complex) for t in tensors]
        self.dt = float(dt)
        self.d = int(d)
        self.metadata = dict(metadata or {})
        for t in self.tensors:
            if t.ndim != 3 or t.shape[1] != self.d**2:
                raise ShapeError(f"PT site tensors must be (left, {self.d**2}, right)")
            t.setflags(write=False)
        if self.tensors[0].shape[0] != 1 or self.tensors[-1].shape[2] != 1:
            raise ShapeError("PT boundary bonds must have dimension 1")
        for k in range(len(self.tensors) - 1):
            if self.tensors[k].shape[2] != self.tensors[k + 1].shape[0]:
                raise ShapeError(f"PT bond mismatch between slots {k} and {k + 1}")
        self._caps = None

    @property
    def n_steps(self) -> int:
        return len(self.tensors)

    @property
    def bond_dims(self) -> list[int]:
        return [t.shape[2] for t in self.tensors[:-1]]

    @property
    def max_bond(self) -> int:
        return max(self.bond_dims, default=1)

    def site(self, m: int) -> np.ndarray:
        """Rank-4 view ``(left, out, in, right)`` of slot ``m``."""
        t = self.tensors[m]
        l, d2, r = t.shape
        out = np.zeros((l, d2, d2, r), dtype=complex)
        idx = np.arange(d2)
        out[:, idx, idx, :] = t
        return out

    def right_caps(self) -> list[np.ndarray]:
        """``caps[m]`` closes the bonds of slots ``m .. n_steps-1``;
        ``caps[n_steps] = [1]``.

        A slot whose Liouville index is diagonal (a+ == a-) exerts no
        influence on the others, so each future slot is closed with the
        normalised trace vector, the average over diagonal indices.
        """
        if self._caps is None:
            d = self.d
            trace = np.eye(d).reshape(-1) / d
            caps = [None] * (self.n_steps + 1)
            caps[-1] = np.ones(1, dtype=complex)
            for m in range(self.n_steps - 1, -1, -1):
                caps[m] = np.einsum("lar,a,r->l", self.tensors[m], trace, caps[m + 1])
            self._caps = caps
        return self._caps

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(struct.pack("<dq", self.dt, self.d))
        for t in self.tensors:
            h.update(struct.pack("<3q", *t.shape))
            h.update(np.ascontiguousarray(t, dtype="<c16").tobytes())
        return h.hexdigest()


def _column(influences: InfluenceSet, depth: int) -> list[np.ndarray]:
    """MPO column adding slot ``j`` coupled to the ``depth`` previous slots.

    Site order is oldest first; the carrier bond holds the Liouville index
    of the new slot and runs from the new (last) site leftwards.
    """
    d2 = influences.d2
    cols = []
    for n in range(depth, 0, -1):
        inf = influences.tensors[n]           # [carrier alpha_j, alpha_i]
        if n == depth:
            w = np.zeros((1, d2, d2, d2), dtype=complex)
            # w[0, a, a, c] = I_n[c, a]
            w[0, np.arange(d2), np.arange(d2), :] = inf.T
        else:
            w = np.zeros((d2, d2, d2, d2), dtype=complex)
            for c in range(d2):
                w[c, np.arange(d2), np.arange(d2), c] = inf[c]
        cols.append(w)
    new = np.zeros((d2 if depth else 1, d2, 1, 1), dtype=complex)
    diag = influences.self_factor
    if depth:
        new[np.arange(d2), np.arange(d2), 0, 0] = diag
    else:
        new[0, :, 0, 0] = diag
    cols.append(new)
    return cols


def hermitian_basis(d: int) -> np.ndarray:
    """Unitary whose columns span Liouville space with vectors invariant under
    ``v(a+, a-) -> conj(v(a-, a+))``.

    Hermiticity of the reduced density matrix rests on the influence weight
    having this symmetry on every slot at once; in this basis the weight and
    every column of the build are real, so the symmetry survives truncation
    exactly.
    """
    cols = []
    for a in range(d):
        v = np.zeros(d * d, dtype=complex)
        v[a * d + a] = 1
        cols.append(v)
    r = 1 / np.sqrt(2)
    for a in range(d):
        for b in range(a + 1, d):
            v = np.zeros(d * d, dtype=complex)
            v[a * d + b] = v[b * d + a] = r
            w = np.zeros(d * d, dtype=complex)
            w[a * d + b] = 1j * r
            w[b * d + a] = -1j * r
            cols += [v, w]
    return np.array(cols).T


def _real_column(col: list[np.ndarray], basis: np.ndarray) -> list[np.ndarray]:
    """Rotate every leg of an MPO column into ``basis`` and drop the (zero)
    imaginary part. Internal bonds are carrier bonds of dimension d^2."""
    inv = basis.conj().T
    out = []
    for k, w in enumerate(col):
        w = np.einsum("ma,lanr->lmnr", inv, w)
        if w.shape[2] == basis.shape[0]:
            w = np.einsum("lmar,an->lmnr", w, basis)
        if k > 0:
            w = np.einsum("cl,lmnr->cmnr", inv, w)
        if k < len(col) - 1:
            w = np.einsum("lmnc,cr->lmnr", w, basis)
        scale = max(np.abs(w).max(), np.finfo(float).tiny)
        if np.abs(w.imag).max() > 1e-10 * scale:
            raise ValidationError("influence column lacks the Hermitian symmetry")
        out.append(np.ascontiguousarray(w.real))
    return out


def build_process_tensor(influences: InfluenceSet, n_steps: int, policy: TruncationPolicy,
                         max_bond_capacity: Optional[int] = None,
                         metadata: Optional[dict] = None,
                         progress: bool = False) -> ProcessTensor:
    """Contract the influence functionals column by column into a PT.

    Interactions further apart than ``influences.n_max`` steps are dropped.
    Raises :class:`CapacityError` if a bond grows beyond ``max_bond_capacity``.
    """
    if n_steps < 1:
        raise ValidationError("n_steps must be >= 1")
    start = time.perf_counter()
    d2 = influences.d2
    d = int(round(np.sqrt(d2)))
    basis = hermitian_basis(d)
    mps = None
    diag = BuildDiagnostics()
    for j in range(n_steps):
        depth = min(j, influences.n_max)
        col = _real_column(_column(influences, depth), basis)
        if mps is None:
            mps = MatrixProductState([col[0][:, :, 0, :]], center=0)
            continue
        mps, err = apply_mpo_column_and_compress(mps, col, policy, grow=True)
        diag.truncation_error += err
        bond = max(mps.bond_dims, default=1)
        diag.max_bond = max(diag.max_bond, bond)
        if max_bond_capacity is not None and bond > max_bond_capacity:
            raise CapacityError(
                f"bond dimension {bond} exceeds capacity {max_bond_capacity} "
                f"at step {j}/{n_steps}; truncation error so far {diag.truncation_error:.3e}")
        if progress and j % 50 == 0:
            log.info("PT column %d/%d: max bond %d", j, n_steps, bond)
    diag.bond_dims = mps.bond_dims
    share = mps.log_scale / len(mps)
    scale = np.exp(share)
    tensors = [np.einsum("lmr,am->lar", t, basis) * scale for t in mps.tensors]
    tensors, diag.causality_correction = restore_causality(tensors, d)
    diag.wall_time = time.perf_counter() - start
    meta = dict(metadata or {})
    meta.update({"policy": {"cutoff": policy.cutoff, "max_bond": policy.max_bond},
                 "n_max": influences.n_max,
                 "diagnostics": diag.to_dict()})
    return ProcessTensor(tensors, influences.dt, d, meta)


def restore_causality(tensors: Sequence[np.ndarray], d: int):
    """Project a truncated PT back onto trace-preserving maps.

    In the exact network a slot with a diagonal Liouville index (a+ == a-)
    that is followed only by traced slots has no influence, so closing slot
    ``m`` with any diagonal index gives the same bond vector. Truncation
    breaks this slightly. Each site is corrected by the smallest change that
    equalises those vectors while keeping their mean, which leaves the
    right caps untouched; the whole network is then normalised so that
    tracing out every slot gives one. Returns ``(tensors, max relative
    correction)``.
    """
    tensors = [np.array(t, dtype=complex) for t in tensors]
    diag = np.arange(d) * (d + 1)
    trace = np.eye(d).reshape(-1) / d
    cap = np.ones(1, dtype=complex)
    worst = 0.0
    for m in range(len(tensors) - 1, -1, -1):
        t = tensors[m]
        v = np.einsum("lar,r->la", t, cap)
        mean = v[:, diag].mean(axis=1)
        norm2 = np.vdot(cap, cap).real
        scale = max(np.abs(v[:, diag]).max(), np.finfo(float).tiny)
        if norm2 > 0:
            dual = cap.conj() / norm2
            for a in diag:
                corr = mean - v[:, a]
                worst = max(worst, float(np.abs(corr).max() / scale))
                t[:, a, :] += np.outer(corr, dual)
        cap = np.einsum("lar,a,r->l", t, trace, cap)
    total = complex(cap[0])
    if total == 0 or not np.isfinite(total):
        raise ValidationError("process tensor has zero or non-finite total weight")
    factor = total ** (-1.0 / len(tensors))
    return [t * factor for t in tensors], worst


# -- file format ---------------------------------------------------------------

MAGIC = b"PTMPS\x00\r\n"

_load_counter = 0


def load_count() -> int:
    """Number of process tensors loaded from disk by this process."""
    return _load_counter


def save(pt: ProcessTensor, path) -> None:
    """Write ``pt`` atomically (temporary file + rename)."""
    meta = {"dt": pt.dt, "d": pt.d, "n_steps": pt.n_steps, "metadata": pt.metadata}
    container.write_atomic(path, container.encode(MAGIC, meta, pt.tensors))


def load(path) -> ProcessTensor:
    global _load_counter
    path = Path(path)
    meta, tensors = container.decode(path.read_bytes(), MAGIC, str(path))
    pt = ProcessTensor(tensors, meta["dt"], meta["d"], meta["metadata"])
    _load_counter += 1
    return pt
