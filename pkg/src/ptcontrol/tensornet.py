"""Small dense tensor-network toolkit: pairwise contraction, truncated SVD and
matrix product states with MPO-column application.

Tensors are plain float64 or complex numpy arrays; a leg is addressed by its axis index.
MPS site tensors have legs ``(left, physical, right)``. MPO tensors have legs
``(left, out, in, right)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import scipy.linalg

from .errors import NumericalError, ShapeError, ValidationError


@dataclass(frozen=True)
class TruncationPolicy:
    """Keep singular values with ``s / s_max >= cutoff``, at most ``max_bond`` of them."""

    cutoff: float = 10**-6.5
    max_bond: Optional[int] = None

    def __post_init__(self):
        if not 0 <= self.cutoff < 1:
            raise ValidationError(f"cutoff must lie in [0, 1), got {self.cutoff}")
        if self.max_bond is not None and self.max_bond < 1:
            raise ValidationError("max_bond must be >= 1")


def contract(a: np.ndarray, b: np.ndarray, leg_pairs: Sequence[tuple[int, int]]) -> np.ndarray:
    """Sum over the paired legs of ``a`` and ``b``.

    The free legs of the result are ordered as the free legs of ``a``
    followed by the free legs of ``b``.
    """
    legs_a = [p[0] for p in leg_pairs]
    legs_b = [p[1] for p in leg_pairs]
    for la, lb in leg_pairs:
        if a.shape[la] != b.shape[lb]:
            raise ShapeError(
                f"leg {la} of a has dimension {a.shape[la]}, "
                f"leg {lb} of b has dimension {b.shape[lb]}")
    return np.tensordot(a, b, axes=(legs_a, legs_b))


def _svd(m: np.ndarray):
    try:
        return scipy.linalg.svd(m, full_matrices=False, lapack_driver="gesdd",
                                check_finite=False)
    except np.linalg.LinAlgError:
        try:
            return scipy.linalg.svd(m, full_matrices=False, lapack_driver="gesvd",
                                    check_finite=False)
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f"SVD did not converge for a {m.shape} matrix") from exc


def truncated_svd(m: np.ndarray, policy: TruncationPolicy):
    """Truncated SVD of a matrix.

    Returns ``(u, s, vh, kept_rank, discarded)`` where ``discarded`` holds the
    dropped singular values. A zero matrix gives rank 1 with ``s = [0]``.
    """
    if m.ndim != 2:
        raise ShapeError("truncated_svd expects a matrix; reshape the tensor first")
    if not np.all(np.isfinite(m)):
        raise NumericalError("non-finite entries in matrix passed to SVD")
    u, s, vh = _svd(m)
    if s.size == 0 or s[0] == 0:
        u0 = np.zeros((m.shape[0], 1), dtype=m.dtype)
        u0[0, 0] = 1
        vh0 = np.zeros((1, m.shape[1]), dtype=m.dtype)
        vh0[0, 0] = 1
        return u0, np.zeros(1), vh0, 1, np.zeros(0)
    keep = int(np.count_nonzero(s >= policy.cutoff * s[0]))
    if policy.max_bond is not None:
        keep = min(keep, policy.max_bond)
    keep = max(keep, 1)
    return u[:, :keep], s[:keep], vh[:keep], keep, s[keep:]


#: the left-to-right pass of a column update keeps singular values down to
#: this fraction of the requested cutoff; the final cut is made right-to-left
ZIP_CUTOFF_FACTOR = 1e-2


def _as_numeric(t) -> np.ndarray:
    # real tensors stay real so symmetric networks can be compressed in real arithmetic
    t = np.asarray(t)
    if t.dtype != np.float64:
        t = t.astype(complex)
    return t


class MatrixProductState:
    """Open-boundary MPS with an explicit scalar prefactor ``exp(log_scale)``.

    ``center`` is the index of the orthogonality centre if the tensors are
    known to be in mixed canonical form around it, otherwise None.
    """

    def __init__(self, tensors: Sequence[np.ndarray], log_scale: float = 0.0,
                 center: Optional[int] = None):
        self.tensors = [_as_numeric(t) for t in tensors]
        self.log_scale = float(log_scale)
        self.center = center
        self._check()

    def _check(self):
        if not self.tensors:
            raise ShapeError("an MPS needs at least one site")
        for t in self.tensors:
            if t.ndim != 3:
                raise ShapeError("MPS site tensors must have rank 3")
        if self.tensors[0].shape[0] != 1 or self.tensors[-1].shape[2] != 1:
            raise ShapeError("boundary bonds must have dimension 1")
        for k in range(len(self.tensors) - 1):
            if self.tensors[k].shape[2] != self.tensors[k + 1].shape[0]:
                raise ShapeError(f"bond mismatch between sites {k} and {k + 1}")

    @classmethod
    def product_state(cls, vectors: Sequence[np.ndarray]) -> "MatrixProductState":
        return cls([np.asarray(v, dtype=complex).reshape(1, -1, 1) for v in vectors], center=None)

    def __len__(self):
        return len(self.tensors)

    @property
    def bond_dims(self) -> list[int]:
        return [t.shape[2] for t in self.tensors[:-1]]

    @property
    def physical_dims(self) -> list[int]:
        return [t.shape[1] for t in self.tensors]

    def copy(self) -> "MatrixProductState":
        return MatrixProductState([t.copy() for t in self.tensors], self.log_scale, self.center)

    def to_dense(self) -> np.ndarray:
        out = self.tensors[0][0]
        for t in self.tensors[1:]:
            out = np.tensordot(out, t, axes=([-1], [0]))
        return out[..., 0] * np.exp(self.log_scale)

    def contract_vectors(self, vectors: Sequence[np.ndarray]) -> complex:
        """Contract every physical leg with the matching vector."""
        env = np.ones(1, dtype=complex)
        for t, v in zip(self.tensors, vectors):
            env = env @ np.tensordot(t, v, axes=([1], [0]))
        return complex(env[0]) * np.exp(self.log_scale)

    def move_center(self, target: int):
        """QR/LQ sweep bringing the orthogonality centre to ``target``."""
        start = self.center
        if start is None:
            self._left_sweep(0, target)
            self._right_sweep(len(self) - 1, target)
        elif start < target:
            self._left_sweep(start, target)
        elif start > target:
            self._right_sweep(start, target)
        self.center = target

    def _left_sweep(self, start: int, stop: int):
        ts = self.tensors
        for k in range(start, stop):
            l, p, r = ts[k].shape
            q, rr = scipy.linalg.qr(ts[k].reshape(l * p, r), mode="economic",
                                    check_finite=False)
            ts[k] = q.reshape(l, p, q.shape[1])
            ts[k + 1] = np.tensordot(rr, ts[k + 1], axes=([1], [0]))

    def _right_sweep(self, start: int, stop: int):
        ts = self.tensors
        for k in range(start, stop, -1):
            l, p, r = ts[k].shape
            q, rr = scipy.linalg.qr(ts[k].reshape(l, p * r).T, mode="economic",
                                    check_finite=False)
            ts[k] = q.T.reshape(q.shape[1], p, r)
            ts[k - 1] = np.tensordot(ts[k - 1], rr.T, axes=([2], [0]))

    def normalize_center(self):
        """Move the norm of the centre tensor into ``log_scale``."""
        c = self.center
        nrm = np.linalg.norm(self.tensors[c])
        if nrm > 0:
            self.tensors[c] = self.tensors[c] / nrm
            self.log_scale += float(np.log(nrm))

    def truncate_sweep(self, start: int, policy: TruncationPolicy) -> float:
        """Right-to-left truncating SVD sweep over sites ``start+1 .. n-1``.

        The centre must sit on the last site. Returns the root-sum-square of
        the relative discarded weights over all bonds touched.
        """
        if self.center != len(self) - 1:
            raise ValidationError("truncate_sweep needs the centre on the last site")
        ts = self.tensors
        err2 = 0.0
        for k in range(len(self) - 1, start, -1):
            l, p, r = ts[k].shape
            u, s, vh, keep, dropped = truncated_svd(ts[k].reshape(l, p * r), policy)
            err2 += _relative_weight(s, dropped) ** 2
            ts[k] = vh.reshape(keep, p, r)
            ts[k - 1] = np.tensordot(ts[k - 1], u * s, axes=([2], [0]))
        self.center = start
        return float(np.sqrt(err2))


def apply_mpo_column_and_compress(mps: MatrixProductState, column: Sequence[np.ndarray],
                                  policy: TruncationPolicy, grow: Optional[bool] = None):
    """Apply an MPO column to the last ``len(column)`` sites and recompress.

    With ``grow`` a new site is appended first and the last column tensor
    (whose ``in`` leg has dimension 1) creates it. By default the MPS grows
    when the column is one site longer than the MPS.
    The MPO's outer bonds must have dimension 1. The input MPS is not
    modified. Returns ``(new_mps, truncation_error)``.
    """
    out = mps.copy()
    n_col = len(column)
    if grow is None:
        grow = n_col == len(out) + 1
    if grow:
        out.tensors.append(np.ones((1, 1, 1), dtype=out.tensors[-1].dtype))
    if n_col > len(out):
        raise ShapeError(f"column of {n_col} sites does not fit an MPS of {len(mps)} sites")
    first = len(out) - n_col
    if column[0].shape[0] != 1 or column[-1].shape[3] != 1:
        raise ShapeError("MPO column boundary bonds must have dimension 1")
    for k, w in enumerate(column):
        site = first + k
        if w.ndim != 4 or w.shape[2] != out.tensors[site].shape[1]:
            raise ShapeError(f"MPO in-leg does not match site {site} physical dimension "
                             f"{out.tensors[site].shape[1]}")
        if k > 0 and w.shape[0] != column[k - 1].shape[3]:
            raise ShapeError("MPO bond mismatch inside the column")
    start = max(first - 1, 0)
    out.move_center(start)
    # left-to-right zip: apply the MPO site by site and restore left
    # orthogonality with loosely truncated SVDs
    zip_policy = TruncationPolicy(policy.cutoff * ZIP_CUTOFF_FACTOR)
    ts = out.tensors
    carry = None
    err2 = 0.0
    n = len(out)
    for site in range(start, n):
        a = ts[site]
        if site >= first:
            w = column[site - first]
            l, p, r = a.shape
            wl, q, _, wr = w.shape
            a = np.einsum("lpr,aqpb->laqrb", a, w, optimize=True).reshape(l * wl, q, r * wr)
        if carry is not None:
            a = np.tensordot(carry, a, axes=([1], [0]))
        if site == n - 1:
            ts[site] = a
            break
        l, p, r = a.shape
        u, sv, vh, keep, dropped = truncated_svd(a.reshape(l * p, r), zip_policy)
        err2 += _relative_weight(sv, dropped) ** 2
        ts[site] = u.reshape(l, p, keep)
        carry = sv[:, None] * vh
    out.center = n - 1
    err = out.truncate_sweep(start, policy)
    out.normalize_center()
    return out, float(np.sqrt(err2 + err**2))


def _relative_weight(kept: np.ndarray, dropped: np.ndarray) -> float:
    total = float(np.sum(kept**2) + np.sum(dropped**2))
    return float(np.sqrt(np.sum(dropped**2) / total)) if total > 0 else 0.0
