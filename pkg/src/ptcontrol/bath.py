"""Bosonic environment: spectral density, correlation function and the
discretised memory coefficients used to build influence functionals.

Units: hbar = 1, time in ps, frequencies in 1/ps, temperature in K.
"""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import asdict, dataclass, field
from typing import Sequence, Tuple

import numpy as np
from scipy import constants
from scipy.integrate import IntegrationWarning, quad

from .errors import NumericalError, ValidationError

#: k_B / hbar in 1/(ps K)
KB_OVER_HBAR = constants.k / constants.hbar * 1e-12

#: relative tolerance of every adaptive quadrature in this module
QUAD_EPSREL = 1e-10
QUAD_LIMIT = 1000

SUPER_OHMIC = "super_ohmic"
GAUSSIAN_PEAKS = "gaussian_peaks"


@dataclass(frozen=True)
class BathSpec:
    """Parameters of a Gaussian bosonic bath.

    ``form="super_ohmic"`` gives J(w) = 2 alpha w^3 / omega_c^2 exp(-w^2/omega_c^2).
    ``form="gaussian_peaks"`` gives a sum of normalised Gaussians, one per
    ``(frequency, weight, width)`` triple in ``peaks``; ``weight`` is the
    integrated coupling |g_k|^2 of the mode. ``alpha`` and ``omega_c`` are
    ignored for that form.
    """

    alpha: float = 0.126
    omega_c: float = 3.04
    temperature: float = 1.0
    form: str = SUPER_OHMIC
    peaks: Tuple[Tuple[float, float, float], ...] = field(default=())

    def __post_init__(self):
        if self.form not in (SUPER_OHMIC, GAUSSIAN_PEAKS):
            raise ValidationError(f"unknown spectral density form {self.form!r}")
        if not self.alpha >= 0:
            raise ValidationError(f"alpha must be >= 0, got {self.alpha}")
        if not self.omega_c > 0:
            raise ValidationError(f"omega_c must be > 0, got {self.omega_c}")
        if not self.temperature >= 0:
            raise ValidationError(f"temperature must be >= 0, got {self.temperature}")
        peaks = tuple(tuple(float(v) for v in p) for p in self.peaks)
        for w, g2, width in peaks:
            if w <= 0 or g2 < 0 or width <= 0:
                raise ValidationError(f"invalid peak {(w, g2, width)}")
        object.__setattr__(self, "peaks", peaks)
        if self.form == GAUSSIAN_PEAKS and not peaks:
            raise ValidationError("gaussian_peaks form needs at least one peak")

    @property
    def kbt(self) -> float:
        """Thermal frequency k_B T / hbar in 1/ps."""
        return KB_OVER_HBAR * self.temperature

    @property
    def is_trivial(self) -> bool:
        if self.form == SUPER_OHMIC:
            return self.alpha == 0
        return all(g2 == 0 for _, g2, _ in self.peaks)

    def support(self) -> list[tuple[float, float]]:
        """Frequency intervals outside of which J is negligible."""
        if self.form == SUPER_OHMIC:
            return [(0.0, 10.0 * self.omega_c)]
        return [(max(0.0, w - 12 * s), w + 12 * s) for w, _, s in self.peaks]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["peaks"] = [list(p) for p in self.peaks]
        return d

    def digest(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()


def spectral_density(spec: BathSpec, omega):
    """Evaluate J(omega) in 1/ps. Accepts scalars or arrays."""
    w = np.asarray(omega, dtype=float)
    if np.any(w < 0):
        raise ValidationError("spectral density is defined for omega >= 0")
    if spec.form == SUPER_OHMIC:
        wc = spec.omega_c
        out = 2.0 * spec.alpha * w**3 / wc**2 * np.exp(-(w**2) / wc**2)
    else:
        out = np.zeros_like(w)
        for w0, g2, s in spec.peaks:
            out = out + g2 * np.exp(-0.5 * ((w - w0) / s) ** 2) / (s * np.sqrt(2 * np.pi))
    return out if out.ndim else float(out)


def _thermal_weighted_density(spec: BathSpec, w):
    """J(w) coth(w / 2 k_B T), with the w -> 0 limit set to 0."""
    w = np.asarray(w, dtype=float)
    jw = np.asarray(spectral_density(spec, w), dtype=float)
    kbt = spec.kbt
    if kbt == 0:
        return jw
    with np.errstate(divide="ignore", invalid="ignore"):
        out = jw / np.tanh(w / (2.0 * kbt))
    return np.where(w > 0, out, 0.0)


def _noise_floor(func, a, b) -> float:
    # roundoff limit for integrals that cancel to ~0: relative to int |f|
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", IntegrationWarning)
        magnitude = quad(lambda w: abs(func(w)), a, b, limit=QUAD_LIMIT)[0]
    return max(1e-12 * magnitude, 1e-300)


def _integrate(func, spec: BathSpec, weight=None, wvar=None, what=""):
    total = 0.0
    for a, b in spec.support():
        kwargs = dict(epsrel=QUAD_EPSREL, epsabs=0.0, limit=QUAD_LIMIT, full_output=1)
        if weight is not None:
            kwargs.update(weight=weight, wvar=wvar)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", IntegrationWarning)
            res = quad(func, a, b, **kwargs)
        value, abserr = res[0], res[1]
        if len(res) > 3 and abserr > 1e-7 * abs(value) and abserr > _noise_floor(func, a, b):
            raise NumericalError(
                f"quadrature did not converge for {what} on [{a}, {b}]: "
                f"value={value:.6e}, abserr={abserr:.2e}, message={res[3]!r}"
            )
        total += value
    return total


@dataclass(frozen=True)
class CorrelationKernel:
    """Bath autocorrelation C(t) = <B(t) B(0)> evaluated by quadrature."""

    spec: BathSpec

    @property
    def kbt(self) -> float:
        return self.spec.kbt

    def __call__(self, t: float) -> complex:
        return correlation(self.spec, t)


def correlation(spec: BathSpec, t: float) -> complex:
    """C(t) = int_0^inf dw J(w) [coth(w/2T) cos(wt) - i sin(wt)]."""
    t = float(t)
    if spec.is_trivial:
        return 0j
    re = _integrate(lambda w: _thermal_weighted_density(spec, w), spec,
                    weight="cos", wvar=t, what=f"Re C({t})")
    if t == 0:
        return complex(re, 0.0)
    im = _integrate(lambda w: spectral_density(spec, w), spec,
                    weight="sin", wvar=t, what=f"Im C({t})")
    return complex(re, -im)


@dataclass(frozen=True)
class EtaCoefficients:
    dt: float
    n_max: int
    eta: np.ndarray

    def __post_init__(self):
        eta = np.asarray(self.eta, dtype=complex)
        if eta.shape != (self.n_max + 1,):
            raise ValidationError("eta must have n_max + 1 entries")
        if not np.all(np.isfinite(eta)):
            raise NumericalError("non-finite memory coefficient")
        eta.setflags(write=False)
        object.__setattr__(self, "eta", eta)


def _sinc_sq_kernel(w, dt):
    # 4 sin^2(w dt/2) / w^2, the Fourier transform of the triangle of half-width dt
    w = np.asarray(w, dtype=float)
    x = 0.5 * w * dt
    return dt**2 * np.sinc(x / np.pi) ** 2


def _eta_zero(spec: BathSpec, dt: float) -> complex:
    # int_0^dt (dt - u) C(u) du
    def re_kernel(w):
        w = np.asarray(w, dtype=float)
        x = w * dt
        # (1 - cos x) / w^2, series below x ~ 1e-3
        small = np.abs(x) < 1e-3
        xs = np.where(small, 1.0, x)
        val = np.where(small, dt**2 * (0.5 - x**2 / 24.0),
                       (1.0 - np.cos(xs)) / np.where(small, 1.0, w) ** 2)
        return val

    def im_kernel(w):
        w = np.asarray(w, dtype=float)
        x = w * dt
        small = np.abs(x) < 1e-2
        xs = np.where(small, 1.0, x)
        val = np.where(small, dt**2 * (x / 6.0 - x**3 / 120.0),
                       (xs - np.sin(xs)) / np.where(small, 1.0, w) ** 2)
        return val

    re = _integrate(lambda w: _thermal_weighted_density(spec, w) * re_kernel(w), spec,
                    what="Re eta_0")
    im = _integrate(lambda w: spectral_density(spec, w) * im_kernel(w), spec,
                    what="Im eta_0")
    return complex(re, -im)


def _eta_n(spec: BathSpec, dt: float, n: int) -> complex:
    # int_{-dt}^{dt} (dt - |u|) C(n dt + u) du
    t = n * dt
    re = _integrate(lambda w: _thermal_weighted_density(spec, w) * _sinc_sq_kernel(w, dt),
                    spec, weight="cos", wvar=t, what=f"Re eta_{n}")
    im = _integrate(lambda w: spectral_density(spec, w) * _sinc_sq_kernel(w, dt),
                    spec, weight="sin", wvar=t, what=f"Im eta_{n}")
    return complex(re, -im)


def eta_coefficients(spec: BathSpec, dt: float, n_max: int) -> EtaCoefficients:
    """Memory coefficients eta_0 .. eta_{n_max} for time step ``dt``.

    eta_0 is the self-interaction of one step,
    eta_n = int_0^dt dt' int_{-n dt}^{-(n-1) dt} dt'' C(t' - t'') for n >= 1.
    Both double integrals are reduced analytically to a single frequency
    integral against the bath spectral density.
    """
    if not dt > 0:
        raise ValidationError(f"dt must be positive, got {dt}")
    if n_max < 0:
        raise ValidationError(f"n_max must be >= 0, got {n_max}")
    if spec.is_trivial:
        return EtaCoefficients(dt, n_max, np.zeros(n_max + 1, dtype=complex))
    eta = np.empty(n_max + 1, dtype=complex)
    eta[0] = _eta_zero(spec, dt)
    for n in range(1, n_max + 1):
        eta[n] = _eta_n(spec, dt, n)
    return EtaCoefficients(dt, n_max, eta)


def decoherence_function(spec: BathSpec, t) -> np.ndarray:
    """Independent-boson dephasing exponent
    Gamma(t) = int dw J(w) coth(w/2T) (1 - cos wt) / w^2."""
    ts = np.atleast_1d(np.asarray(t, dtype=float))
    out = np.empty(ts.shape)
    for i, ti in enumerate(ts):
        def f(w):
            w = np.asarray(w, dtype=float)
            x = w * ti
            small = np.abs(x) < 1e-3
            xs = np.where(small, 1.0, x)
            ker = np.where(small, ti**2 * (0.5 - x**2 / 24.0),
                           (1 - np.cos(xs)) / np.where(small, 1.0, w) ** 2)
            return _thermal_weighted_density(spec, w) * ker
        out[i] = 0.0 if spec.is_trivial else _integrate(f, spec, what=f"Gamma({ti})")
    return out if np.ndim(t) else float(out[0])


def bath_from_modes(frequencies: Sequence[float], couplings: Sequence[float],
                    temperature: float, width: float) -> BathSpec:
    """Bath made of discrete modes broadened into narrow Gaussians."""
    peaks = tuple((float(w), float(abs(g)) ** 2, float(width))
                  for w, g in zip(frequencies, couplings))
    return BathSpec(temperature=temperature, form=GAUSSIAN_PEAKS, peaks=peaks)
