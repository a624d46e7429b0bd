"""Gaussian input pulse and a pixelated spectral phase shaper.

Fourier convention: E(t) = 1/(2 pi) int E~(w) exp(-i w t) dw, so a component
at positive w is blue of the carrier. The shaper multiplies the spectrum by

    M(w) = sum_n exp(i phi_n) P(w - Omega_n),
    P(w) = [erf((w + p/2)/s) - erf((w - p/2)/s)] / 2,

a pixel of width p blurred by the Gaussian focal spot of width s. Its
impulse response is

    h(t) = p/(2 pi) sinc(p t/2) exp(-s^2 t^2/4) sum_n exp(i phi_n) exp(-i Omega_n t).

With every phase zero, M = 1 inside the pixel band. The pixel comb is
centred on the pulse carrier, so the mask acts on the envelope and the carrier
detuning multiplies the shaped field afterwards.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.special import erf

from .errors import ResolutionError, SamplingError, ShapeError, ValidationError

TWO_PI = 2.0 * np.pi

#: minimum number of grid samples per input pulse duration
MIN_SAMPLES_PER_TAU = 8
#: the grid must reach this many pulse durations either side of the centre
SUPPORT_IN_TAU = 5.0
#: largest tolerated fraction of the spectral energy beyond the output Nyquist frequency
ALIAS_TOLERANCE = 1e-6
OVERSAMPLE = 8


@dataclass(frozen=True)
class SlmSpec:
    n_pixels: int = 512
    span: float = TWO_PI * 128.0
    spot_pixels: float = 2.0

    def __post_init__(self):
        if self.n_pixels < 2 or self.n_pixels % 2:
            raise ValidationError("n_pixels must be even and >= 2")
        if not self.span > 0 or not self.spot_pixels > 0:
            raise ValidationError("span and spot width must be positive")

    @property
    def pixel_width(self) -> float:
        return self.span / self.n_pixels

    @property
    def spot_width(self) -> float:
        return self.spot_pixels * self.pixel_width

    @property
    def centers(self) -> np.ndarray:
        """Pixel centre frequencies, symmetric about the carrier."""
        n = np.arange(self.n_pixels)
        return (n - (self.n_pixels - 1) / 2) * self.pixel_width

    @property
    def x(self) -> np.ndarray:
        """Mask coordinate of each pixel, x(n) = (n - N/2) / (N/2)."""
        half = self.n_pixels // 2
        return (np.arange(self.n_pixels) - half) / half

    def to_dict(self) -> dict:
        return {"n_pixels": self.n_pixels, "span": self.span, "spot_pixels": self.spot_pixels}


@dataclass(frozen=True)
class PhaseMask:
    """Continuous mask function f(x) on x in [-1, 1].

    ``kind="polynomial"``: f(x) = sum_k coefficients[k] x^k.
    ``kind="segments"``: f is the integral of a piecewise constant slope over
    ``len(slopes)`` equal segments with f(-1) = 0; with ``smooth`` the
    segment end points are joined by a cubic spline instead of straight lines.
    ``kind="function"``: an arbitrary vectorised callable (not serialisable).
    """

    kind: str = "polynomial"
    coefficients: tuple = (0.0,)
    slopes: tuple = ()
    smooth: bool = True
    func: Optional[Callable] = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.kind == "polynomial":
            c = tuple(float(v) for v in self.coefficients)
            if not c or not all(math.isfinite(v) for v in c):
                raise ValidationError("polynomial mask needs finite coefficients")
            object.__setattr__(self, "coefficients", c)
        elif self.kind == "segments":
            s = tuple(float(v) for v in self.slopes)
            if len(s) < 1 or not all(math.isfinite(v) for v in s):
                raise ValidationError("segment mask needs at least one finite slope")
            object.__setattr__(self, "slopes", s)
        elif self.kind == "function":
            if not callable(self.func):
                raise ValidationError("function mask needs a callable")
        else:
            raise ValidationError(f"unknown mask kind {self.kind!r}")

    @classmethod
    def flat(cls) -> "PhaseMask":
        return cls("polynomial", (0.0,))

    @classmethod
    def parabola(cls, offset: float, curvature: float) -> "PhaseMask":
        """f(x) = offset + curvature * x^2."""
        return cls("polynomial", (offset, 0.0, curvature))

    @classmethod
    def segments(cls, slopes: Sequence[float], smooth: bool = True) -> "PhaseMask":
        return cls("segments", slopes=tuple(slopes), smooth=smooth)

    @classmethod
    def from_function(cls, f: Callable) -> "PhaseMask":
        return cls("function", func=f)

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.kind == "polynomial":
            return np.polynomial.polynomial.polyval(x, self.coefficients)
        if self.kind == "function":
            return np.asarray(self.func(x), dtype=float) * np.ones_like(x)
        k = len(self.slopes)
        knots = np.linspace(-1.0, 1.0, k + 1)
        values = np.concatenate([[0.0], np.cumsum(self.slopes) * (2.0 / k)])
        if self.smooth and k >= 2:
            return CubicSpline(knots, values)(x)
        return np.interp(x, knots, values)

    def pixel_phases(self, slm: SlmSpec) -> np.ndarray:
        """phi_n = f(x(n)) wrapped into [0, 2 pi)."""
        phi = np.mod(self(slm.x), TWO_PI)
        phi[phi >= TWO_PI] = 0.0
        return phi

    def to_dict(self) -> dict:
        if self.kind == "function":
            raise ValidationError("a function mask cannot be serialised")
        if self.kind == "polynomial":
            return {"kind": "polynomial", "coefficients": list(self.coefficients)}
        return {"kind": "segments", "slopes": list(self.slopes), "smooth": self.smooth}

    @classmethod
    def from_dict(cls, d: dict) -> "PhaseMask":
        d = dict(d)
        kind = d.pop("kind", "polynomial")
        if kind == "polynomial":
            allowed = {"coefficients"}
        elif kind == "segments":
            allowed = {"slopes", "smooth"}
        else:
            raise ValidationError(f"unknown mask kind {kind!r}")
        extra = set(d) - allowed
        if extra:
            raise ValidationError(f"unexpected mask fields {sorted(extra)}")
        if kind == "polynomial":
            return cls("polynomial", tuple(d.get("coefficients", (0.0,))))
        return cls("segments", slopes=tuple(d["slopes"]), smooth=bool(d.get("smooth", True)))


@dataclass(frozen=True)
class PulseSpec:
    """Gaussian input pulse of area ``theta`` centred at ``t_center``.

    ``tau`` in ps, ``delta`` (carrier detuning) in 1/ps, ``theta`` in rad.
    """

    tau: float = 0.1
    delta: float = 0.0
    theta: float = np.pi / 2
    mask: PhaseMask = field(default_factory=PhaseMask.flat)
    t_center: float = 2.0

    def __post_init__(self):
        if not (self.tau > 0 and math.isfinite(self.tau)):
            raise ValidationError(f"tau must be positive, got {self.tau}")
        if not (self.theta >= 0 and math.isfinite(self.theta)):
            raise ValidationError(f"theta must be >= 0, got {self.theta}")
        if not (math.isfinite(self.delta) and math.isfinite(self.t_center)):
            raise ValidationError("delta and t_center must be finite")

    def replace(self, **changes) -> "PulseSpec":
        kw = {"tau": self.tau, "delta": self.delta, "theta": self.theta,
              "mask": self.mask, "t_center": self.t_center}
        kw.update(changes)
        return PulseSpec(**kw)

    def to_dict(self) -> dict:
        return {"tau": self.tau, "delta": self.delta, "theta": self.theta,
                "t_center": self.t_center, "mask": self.mask.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "PulseSpec":
        d = dict(d)
        mask = PhaseMask.from_dict(d.pop("mask", {"kind": "polynomial"}))
        extra = set(d) - {"tau", "delta", "theta", "t_center"}
        if extra:
            raise ValidationError(f"unexpected pulse fields {sorted(extra)}")
        return cls(mask=mask, **{k: float(v) for k, v in d.items()})


def _uniform_step(grid) -> float:
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or grid.size < 2:
        raise ShapeError("time grid must be a 1-D array with at least two samples")
    steps = np.diff(grid)
    h = float(steps.mean())
    if not h > 0 or np.max(np.abs(steps - h)) > 1e-9 * max(h, abs(grid).max()):
        raise SamplingError("time grid must be uniform and increasing")
    return h


def input_field(spec: PulseSpec, grid) -> np.ndarray:
    """E_in(t) = theta/(sqrt(pi) tau) exp(-(t-tc)^2/tau^2) exp(-i delta t)."""
    grid = np.asarray(grid, dtype=float)
    _check_sampling(spec, _uniform_step(grid))
    _check_support(spec, grid)
    return _gaussian(spec, grid)


def _check_sampling(spec: PulseSpec, h: float) -> None:
    if spec.tau / h < MIN_SAMPLES_PER_TAU:
        raise SamplingError(f"grid step {h} ps gives fewer than {MIN_SAMPLES_PER_TAU} "
                            f"samples per pulse duration {spec.tau} ps")


def _check_support(spec: PulseSpec, grid: np.ndarray) -> None:
    reach = SUPPORT_IN_TAU * spec.tau
    if grid[0] > spec.t_center - reach or grid[-1] < spec.t_center + reach:
        raise SamplingError(f"grid [{grid[0]}, {grid[-1]}] ps does not cover the pulse "
                            f"support {spec.t_center} +- {reach} ps")


def _gaussian(spec: PulseSpec, t) -> np.ndarray:
    return _envelope(spec, t) * _carrier(spec, t)


def _envelope(spec: PulseSpec, t) -> np.ndarray:
    s = t - spec.t_center
    return spec.theta / (np.sqrt(np.pi) * spec.tau) * np.exp(-(s / spec.tau) ** 2) + 0j


def _carrier(spec: PulseSpec, t) -> np.ndarray:
    return np.exp(-1j * spec.delta * np.asarray(t, dtype=float))


def _check_phases(slm: SlmSpec, phases) -> np.ndarray:
    phases = np.asarray(phases, dtype=float)
    if phases.shape != (slm.n_pixels,):
        raise ShapeError(f"expected {slm.n_pixels} pixel phases, got shape {phases.shape}")
    return phases


def impulse_response(slm: SlmSpec, phases, grid) -> np.ndarray:
    """h(t) sampled at the times in ``grid`` (units 1/ps)."""
    phases = _check_phases(slm, phases)
    t = np.asarray(grid, dtype=float)
    p, s = slm.pixel_width, slm.spot_width
    env = p / TWO_PI * np.sinc(p * t / (2 * np.pi)) * np.exp(-(s * t) ** 2 / 4)
    comb = np.exp(-1j * np.outer(t, slm.centers)) @ np.exp(1j * phases)
    return env * comb


def pixel_response(slm: SlmSpec, omega) -> np.ndarray:
    """``P(omega - Omega_n)`` as a ``(len(omega), n_pixels)`` matrix."""
    w = np.asarray(omega, dtype=float)[:, None] - slm.centers[None, :]
    p, s = slm.pixel_width, slm.spot_width
    return 0.5 * (erf((w + p / 2) / s) - erf((w - p / 2) / s))


def frequency_response(slm: SlmSpec, phases, omega) -> np.ndarray:
    """M(omega) of the mask."""
    phases = _check_phases(slm, phases)
    return pixel_response(slm, omega) @ np.exp(1j * phases)


def _response_reach(slm: SlmSpec) -> float:
    # half-width beyond which P and the time envelope are below 1e-17
    return slm.span / 2 + slm.pixel_width + 7 * slm.spot_width


@functools.lru_cache(maxsize=8)
def _band_matrix(slm: SlmSpec, n_fft: int, h_fine: float):
    omega = TWO_PI * np.fft.fftfreq(n_fft, h_fine)
    band = np.flatnonzero(np.abs(omega) <= _response_reach(slm))
    mat = pixel_response(slm, omega[band])
    mat.setflags(write=False)
    return band, mat


def _fine_grid(grid, slm: SlmSpec, oversample: int):
    grid = np.asarray(grid, dtype=float)
    h = _uniform_step(grid)
    hf = h / oversample
    # the impulse response envelope exp(-s^2 t^2/4) is below 1e-17 beyond pad
    pad = 2 * np.sqrt(17 * np.log(10)) / slm.spot_width
    n_pad = int(np.ceil(pad / hf))
    n_core = (grid.size - 1) * oversample + 1
    n_fft = 1 << int(np.ceil(np.log2(n_core + 2 * n_pad)))
    start = grid[0] - n_pad * hf
    return start + hf * np.arange(n_fft), n_pad, hf


def _prepare(spec: PulseSpec, slm: SlmSpec, grid: np.ndarray, oversample: int):
    if oversample < 1:
        raise ValidationError("oversample must be >= 1")
    t_fine, n_pad, hf = _fine_grid(grid, slm, oversample)
    _check_sampling(spec, hf)
    _check_support(spec, grid)
    return t_fine, n_pad, hf


def shape(spec: PulseSpec, slm: SlmSpec, grid, oversample: int = OVERSAMPLE) -> np.ndarray:
    """Shaped field at the times in ``grid``: the envelope of E_in convolved
    with h, times the carrier exp(-i delta t).

    The convolution is a product in the frequency domain on a grid
    ``oversample`` times finer than ``grid``, zero padded to a power of two
    by more than the impulse response support. The input pulse must be
    resolved on the fine grid and lie inside ``grid``.
    """
    grid = np.asarray(grid, dtype=float)
    t_fine, n_pad, hf = _prepare(spec, slm, grid, oversample)
    if spec.theta == 0:
        return np.zeros(grid.size, dtype=complex)
    spectrum = np.fft.ifft(_envelope(spec, t_fine))
    band, mat = _band_matrix(slm, t_fine.size, hf)
    shaped = np.zeros_like(spectrum)
    shaped[band] = spectrum[band] * (mat @ np.exp(1j * spec.mask.pixel_phases(slm)))
    _check_alias(shaped, t_fine.size, hf, grid[1] - grid[0], spec.delta)
    out = np.fft.fft(shaped)
    return out[n_pad:n_pad + (grid.size - 1) * oversample + 1:oversample] * _carrier(spec, grid)


def _check_alias(spectrum, n_fft: int, hf: float, h: float, shift: float = 0.0) -> None:
    # the carrier moves envelope component w to w + shift
    omega = TWO_PI * np.fft.fftfreq(n_fft, hf) + shift
    power = np.abs(spectrum) ** 2
    total = power.sum()
    if total == 0:
        return
    beyond = power[np.abs(omega) >= np.pi / h].sum() / total
    if beyond > ALIAS_TOLERANCE:
        raise ResolutionError(f"{beyond:.2e} of the shaped pulse energy lies beyond the "
                              f"Nyquist frequency {np.pi / h:.1f} 1/ps of the {h} ps grid")


def shape_direct(spec: PulseSpec, slm: SlmSpec, grid, oversample: int = OVERSAMPLE) -> np.ndarray:
    """Same as :func:`shape` by explicit time-domain convolution with h(t).

    Slow; kept as an independent cross-check of the frequency-domain route.
    """
    grid = np.asarray(grid, dtype=float)
    t_fine, n_pad, hf = _prepare(spec, slm, grid, oversample)
    e_fine = _envelope(spec, t_fine)
    lags = hf * np.arange(-n_pad, n_pad + 1)
    h = impulse_response(slm, spec.mask.pixel_phases(slm), lags)
    full = np.convolve(e_fine, h, mode="same") * hf
    return full[n_pad:n_pad + (grid.size - 1) * oversample + 1:oversample] * _carrier(spec, grid)


def drive_grid(n_steps: int, dt: float, t0: float = 0.0) -> np.ndarray:
    """Midpoints of the propagation steps, where the drive is sampled."""
    return t0 + dt * (np.arange(n_steps) + 0.5)


def energy(field, dt: float) -> float:
    return float(np.sum(np.abs(field) ** 2) * dt)
