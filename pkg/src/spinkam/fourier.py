"""Real 1-periodic functions as truncated Fourier series at working precision.

Coefficients are stored in FFT order (``k = 0..L/2-1, -L/2..-1``) for
``f(theta) = sum_k c_k exp(2 pi i k theta)``.  The unpaired ``k = -L/2`` slot
is kept at zero and ``c_{-k} = conj(c_k)`` holds exactly, so ``to_grid``
returns real samples.  A consequence: sampled data with a component at the
Nyquist frequency loses that component on the way in.
"""
from __future__ import annotations

from pathlib import Path

import mpmath
import numpy as np
from mpmath import mp

from .numerics import PrecisionError, eps_digits, fft, format_scalar, kahan_sum, linear_fit, parse_scalar

TAIL_FRACTION = mp.mpf(1) / 4
MIN_FIT_MODES = 4

_phase_cache: dict = {}


def _check_length(n: int):
    if n < 2 or n & (n - 1):
        raise ValueError(f"series length {n} is not a power of two >= 2")


def wavenumbers(L: int) -> np.ndarray:
    """Integer k for each slot in FFT order."""
    k = np.arange(L)
    k[L // 2:] -= L
    return k


def _phases(L: int, omega) -> np.ndarray:
    """exp(2 pi i k omega) for every slot (FFT order)."""
    omega = mp.mpf(omega)
    key = (L, omega, mp.prec)
    ph = _phase_cache.get(key)
    if ph is None:
        ph = np.empty(L, dtype=object)
        for k in range(L // 2):
            ph[k] = mp.expjpi(2 * k * omega)
            ph[(L - k) % L] = mp.conj(ph[k])
        ph[L // 2] = mp.mpc(0)
        if len(_phase_cache) > 64:
            _phase_cache.clear()
        _phase_cache[key] = ph
    return ph


class FourierSeries:
    __slots__ = ("coeffs",)

    def __init__(self, coeffs):
        c = np.array([mp.mpc(v) for v in coeffs], dtype=object)
        _check_length(len(c))
        self.coeffs = c
        self._symmetrize()

    # construction -------------------------------------------------------------
    @classmethod
    def _raw(cls, coeffs: np.ndarray) -> "FourierSeries":
        obj = cls.__new__(cls)
        obj.coeffs = coeffs
        return obj

    @classmethod
    def from_grid(cls, samples) -> "FourierSeries":
        """Series whose values at ``theta_j = j/L`` are ``samples``."""
        samples = [mp.mpf(v) for v in samples]
        _check_length(len(samples))
        obj = cls._raw(fft(samples))
        obj._symmetrize()
        return obj

    @classmethod
    def zeros(cls, L: int) -> "FourierSeries":
        _check_length(L)
        return cls._raw(np.array([mp.mpc(0)] * L, dtype=object))

    @classmethod
    def constant(cls, value, L: int) -> "FourierSeries":
        s = cls.zeros(L)
        s.coeffs[0] = mp.mpc(value)
        return s

    @classmethod
    def from_modes(cls, modes: dict, L: int) -> "FourierSeries":
        """Build from ``{k: c_k}`` for ``k >= 0``; negative modes are implied."""
        s = cls.zeros(L)
        for k, v in modes.items():
            if not 0 <= k < L // 2:
                raise ValueError(f"mode {k} outside 0..{L // 2 - 1}")
            s.coeffs[k] = mp.mpc(v)
            if k:
                s.coeffs[L - k] = mp.conj(s.coeffs[k])
        s.coeffs[0] = mp.mpc(s.coeffs[0].real)
        return s

    def _symmetrize(self):
        c = self.coeffs
        L = len(c)
        h = L // 2
        c[h] = mp.mpc(0)
        c[0] = mp.mpc(c[0].real)
        if h > 1:
            pos = c[1:h]
            neg = np.conj(c[L - 1:h:-1])
            avg = (pos + neg) / 2
            c[1:h] = avg
            c[L - 1:h:-1] = np.conj(avg)

    # basic views --------------------------------------------------------------
    @property
    def L(self) -> int:
        return len(self.coeffs)

    def copy(self) -> "FourierSeries":
        return FourierSeries._raw(self.coeffs.copy())

    def mode(self, k: int) -> mpmath.mpc:
        if not -self.L // 2 < k < self.L // 2:
            return mp.mpc(0)
        return self.coeffs[k % self.L]

    def mean(self) -> mpmath.mpf:
        return self.coeffs[0].real

    def to_grid(self) -> np.ndarray:
        vals = fft(self.coeffs, inverse=True)
        return np.array([v.real for v in vals], dtype=object)

    def __call__(self, theta) -> mpmath.mpf:
        theta = mp.mpf(theta)
        h = self.L // 2
        total = self.coeffs[0].real
        for k in range(1, h):
            total += 2 * (self.coeffs[k] * mp.expjpi(2 * k * theta)).real
        return total

    # algebra --------------------------------------------------------------------
    def _same(self, other: "FourierSeries"):
        if self.L != other.L:
            raise ValueError(f"length mismatch {self.L} != {other.L}")

    def __add__(self, other):
        if isinstance(other, FourierSeries):
            self._same(other)
            return FourierSeries._raw(self.coeffs + other.coeffs)
        c = self.coeffs.copy()
        c[0] = c[0] + mp.mpf(other)
        return FourierSeries._raw(c)

    __radd__ = __add__

    def __neg__(self):
        return FourierSeries._raw(-self.coeffs)

    def __sub__(self, other):
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, scale):
        if isinstance(scale, FourierSeries):
            return self.multiply(scale)
        return FourierSeries._raw(self.coeffs * mp.mpf(scale))

    __rmul__ = __mul__

    def __truediv__(self, scale):
        return FourierSeries._raw(self.coeffs / mp.mpf(scale))

    def multiply(self, other: "FourierSeries") -> "FourierSeries":
        """Pointwise product, evaluated on the grid (aliasing as usual)."""
        self._same(other)
        return FourierSeries.from_grid(self.to_grid() * other.to_grid())

    def max_abs_coeff(self) -> mpmath.mpf:
        return max(abs(v) for v in self.coeffs)

    # operators ---------------------------------------------------------------
    def shift(self, omega) -> "FourierSeries":
        """``theta -> f(theta + omega)``."""
        return FourierSeries._raw(self.coeffs * _phases(self.L, omega))

    def derivative(self) -> "FourierSeries":
        k = wavenumbers(self.L)
        fac = np.array([mp.mpc(0, 2 * mp.pi * int(kk)) for kk in k], dtype=object)
        fac[self.L // 2] = mp.mpc(0)
        return FourierSeries._raw(self.coeffs * fac)

    def resize(self, L_new: int) -> "FourierSeries":
        """Zero-pad or truncate the spectrum to ``L_new`` slots."""
        _check_length(L_new)
        L = self.L
        out = FourierSeries.zeros(L_new)
        h = min(L, L_new) // 2
        out.coeffs[:h] = self.coeffs[:h]
        if h > 1:
            out.coeffs[L_new - h + 1:] = self.coeffs[L - h + 1:]
        out.coeffs[L_new // 2] = mp.mpc(0)
        return out

    def phase_shift(self, delta) -> "FourierSeries":
        """``theta -> f(theta - delta)``."""
        return self.shift(-mp.mpf(delta))

    def __repr__(self):
        return f"FourierSeries(L={self.L})"


# cohomological equations ------------------------------------------------------

def solve_cohomology_contractive(S: FourierSeries, lam, omega) -> FourierSeries:
    """Solve ``B(theta) - lam B(theta + omega) = -S(theta)``."""
    lam = mp.mpf(lam)
    if abs(lam) == 1:
        raise ValueError("contractive solver needs |lambda| != 1")
    ph = _phases(S.L, omega)
    den = 1 - lam * ph
    den[S.L // 2] = mp.mpc(1)
    floor = mp.mpf(10) ** (-(mp.dps // 2))
    if min(abs(d) for d in den) < floor:
        raise PrecisionError("degenerate divisor in the contractive cohomological equation")
    return FourierSeries._raw(-S.coeffs / den)


def solve_cohomology_neutral(R: FourierSeries, omega) -> FourierSeries:
    """Solve ``W(theta) - W(theta + omega) = R(theta)`` with zero-mean ``W``."""
    if abs(R.coeffs[0]) > eps_digits(10):
        raise ValueError("neutral cohomological equation needs a zero-mean right side")
    ph = _phases(R.L, omega)
    den = 1 - ph
    den[0] = mp.mpc(1)
    den[R.L // 2] = mp.mpc(1)
    floor = mp.mpf(10) ** (-(mp.dps // 2))
    if min(abs(d) for d in den) < floor:
        raise PrecisionError("small divisor below the working-precision floor")
    out = R.coeffs / den
    out[0] = mp.mpc(0)
    return FourierSeries._raw(out)


# norms and regularity ---------------------------------------------------------

def sobolev_seminorm(series: FourierSeries, r) -> mpmath.mpf:
    """``(sum_k (2 pi k)^(2r) |c_k|^2)^(1/2)``, summed in ascending ``|k|``."""
    r = mp.mpf(r)
    if r < 0:
        raise ValueError("Sobolev order must be non-negative")
    c = series.coeffs
    L = series.L
    two_pi = 2 * mp.pi

    def terms():
        if r == 0:
            yield abs(c[0]) ** 2
        for k in range(1, L // 2):
            yield (two_pi * k) ** (2 * r) * (abs(c[k]) ** 2 + abs(c[L - k]) ** 2)

    return mp.sqrt(kahan_sum(terms()))


def tail_fraction_norm(series: FourierSeries, fraction=TAIL_FRACTION) -> mpmath.mpf:
    """Largest ``|c_k|`` among the top ``fraction`` of wavenumbers ``|k| < L/2``."""
    fraction = mp.mpf(fraction)
    if not 0 < fraction <= 1:
        raise ValueError("fraction must lie in (0, 1]")
    L = series.L
    h = L // 2
    cut = int(mp.ceil((1 - fraction) * h))
    best = mp.zero
    for k in range(max(cut, 0), h):
        best = max(best, abs(series.coeffs[k]), abs(series.coeffs[(L - k) % L]))
    return best


def analyticity_width(series: FourierSeries, window=(mp.mpf(1) / 8, mp.mpf(3) / 8)) -> mpmath.mpf:
    """Strip half-width from the exponential decay rate of the coefficients.

    Regresses ``log10 max(|c_k|, |c_-k|)`` on ``k`` over ``k in [lo L, hi L]``,
    skipping modes that sit on the round-off floor.
    """
    L = series.L
    lo = int(mp.ceil(window[0] * L))
    hi = min(int(mp.floor(window[1] * L)), L // 2 - 1)
    floor = eps_digits(10)
    pts = []
    for k in range(max(lo, 1), hi + 1):
        m = max(abs(series.coeffs[k]), abs(series.coeffs[L - k]))
        if m > floor:
            pts.append((k, mp.log10(m)))
    if len(pts) < MIN_FIT_MODES:
        raise ValueError(f"only {len(pts)} usable modes for the decay fit")
    slope, _ = linear_fit(pts)
    return -slope * mp.log(10) / (2 * mp.pi)


# persistence --------------------------------------------------------------------

def series_lines(series: FourierSeries, digits: int | None = None) -> list:
    digits = mp.dps if digits is None else digits
    L = series.L
    lines = [f"{L} {digits}"]
    for k, c in zip(wavenumbers(L), series.coeffs):
        lines.append(f"{int(k)} {format_scalar(c.real)} {format_scalar(c.imag)}")
    return lines


def parse_series_lines(lines, source="series") -> tuple:
    """Inverse of ``series_lines``; returns ``(series, precision_digits)``."""
    lines = [ln for ln in lines if ln.strip()]
    if not lines:
        raise ValueError(f"{source}: empty series")
    try:
        L, digits = (int(v) for v in lines[0].split())
    except ValueError as exc:
        raise ValueError(f"{source}: malformed header {lines[0]!r}") from exc
    _check_length(L)
    if len(lines) != L + 1:
        raise ValueError(f"{source}: expected {L} coefficient lines, found {len(lines) - 1}")
    coeffs = np.array([mp.mpc(0)] * L, dtype=object)
    seen = set()
    for ln in lines[1:]:
        parts = ln.split()
        if len(parts) != 3:
            raise ValueError(f"{source}: malformed line {ln!r}")
        k = int(parts[0])
        if not -L // 2 <= k < L // 2 or k in seen:
            raise ValueError(f"{source}: bad wavenumber {k}")
        seen.add(k)
        coeffs[k % L] = mp.mpc(parse_scalar(parts[1]), parse_scalar(parts[2]))
    return FourierSeries(coeffs), digits


def write_series(path, series: FourierSeries, digits: int | None = None) -> None:
    Path(path).write_text("\n".join(series_lines(series, digits)) + "\n")


def read_series(path) -> tuple:
    """Returns ``(series, precision_digits)``."""
    return parse_series_lines(Path(path).read_text().splitlines(), str(path))
