"""Working-precision arithmetic shared by every module.

Scalars are ``mpmath.mpf`` values and complex scalars ``mpmath.mpc``; the
working precision is the global ``mpmath.mp`` context, configured in decimal
digits.  Grids of scalars are numpy object arrays.
"""
from __future__ import annotations

import contextlib
from typing import Iterable, Sequence

import mpmath
import numpy as np
from mpmath import libmp, mp

DEFAULT_DIGITS = 70


class PrecisionError(ArithmeticError):
    """Raised when an operation cannot be carried out at working precision."""


def set_precision(digits: int) -> None:
    if digits < 10:
        raise ValueError("precision must be at least 10 digits")
    mp.dps = int(digits)


def get_precision() -> int:
    return mp.dps


@contextlib.contextmanager
def working_precision(digits: int):
    """Temporarily switch the global working precision."""
    old = mp.dps
    set_precision(digits)
    try:
        yield
    finally:
        mp.dps = old


def scalar(x) -> mpmath.mpf:
    """Coerce to a working-precision real.

    Strings are parsed at working precision.  A binary float is read through
    its shortest decimal repr, so ``1e-3`` means one thousandth.
    """
    if isinstance(x, float):
        return mp.mpf(repr(x))
    return mp.mpf(x)


def eps_digits(shift: float = 0) -> mpmath.mpf:
    """``10**(-precision + shift)``, the usual tolerance scale."""
    return mp.mpf(10) ** (-mp.dps + shift)


def format_scalar(x) -> str:
    """Scientific notation, enough digits for a lossless round trip."""
    x = mp.mpf(x)
    digits = max(mp.dps, libmp.repr_dps(mp.prec))
    return libmp.to_str(x._mpf_, digits, strip_zeros=False, min_fixed=0, max_fixed=0,
                        show_zero_exponent=True)


def parse_scalar(text: str) -> mpmath.mpf:
    return mp.mpf(text.strip())


def kahan_sum(values: Iterable) -> mpmath.mpf:
    """Compensated (Kahan-Babuska) summation in the order given."""
    total = mp.zero
    comp = mp.zero
    for v in values:
        v = mp.mpf(v)
        t = total + v
        if abs(total) >= abs(v):
            comp += (total - t) + v
        else:
            comp += (v - t) + total
        total = t
    return total + comp


def kahan_sum_complex(values: Iterable) -> mpmath.mpc:
    vals = [mp.mpc(v) for v in values]
    return mp.mpc(kahan_sum(v.real for v in vals), kahan_sum(v.imag for v in vals))


def _is_power_of_two(n: int) -> bool:
    return n > 0 and n & (n - 1) == 0


_root_cache: dict = {}


def _roots(n: int) -> np.ndarray:
    """exp(-2 pi i j / n) for j < n/2 at working precision."""
    key = (n, mp.prec)
    w = _root_cache.get(key)
    if w is None:
        w = np.empty(n // 2, dtype=object)
        for j in range(n // 2):
            c, s = mp.cos_sin(2 * mp.pi * j / n)
            w[j] = mp.mpc(c, -s)
        _root_cache[key] = w
    return w


def _bit_reverse(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


def fft(data: Sequence, inverse: bool = False) -> np.ndarray:
    """Radix-2 discrete Fourier transform at working precision.

    Forward: ``c_k = (1/L) sum_j f_j exp(-2 pi i j k / L)``, coefficients in the
    order ``k = 0..L/2-1, -L/2..-1``.  The inverse omits the ``1/L``.
    """
    a = np.array([mp.mpc(v) for v in data], dtype=object)
    n = len(a)
    if not _is_power_of_two(n):
        raise ValueError(f"FFT length {n} is not a power of two")
    a = a[_bit_reverse(n)]
    roots = _roots(n)
    if inverse:
        roots = np.array([mp.conj(w) for w in roots], dtype=object)
    m = 2
    while m <= n:
        half = m // 2
        tw = roots[:: n // m][:half]
        blocks = a.reshape(n // m, m)
        even = blocks[:, :half]
        odd = blocks[:, half:] * tw
        a = np.concatenate([even + odd, even - odd], axis=1).reshape(n)
        m *= 2
    if not inverse:
        inv_n = mp.mpf(1) / n
        a = a * inv_n
    return a


def linear_fit(points: Sequence) -> tuple:
    """Ordinary least squares ``y = slope * x + intercept``."""
    pts = [(mp.mpf(x), mp.mpf(y)) for x, y in points]
    if len(pts) < 2:
        raise ValueError("linear_fit needs at least two points")
    n = len(pts)
    xbar = kahan_sum(x for x, _ in pts) / n
    ybar = kahan_sum(y for _, y in pts) / n
    sxx = kahan_sum((x - xbar) ** 2 for x, _ in pts)
    if sxx == 0 or sxx <= (abs(xbar) + 1) ** 2 * eps_digits(2):
        raise ValueError("linear_fit abscissae are degenerate")
    sxy = kahan_sum((x - xbar) * (y - ybar) for x, y in pts)
    slope = sxy / sxx
    return slope, ybar - slope * xbar


def to_object_array(values) -> np.ndarray:
    return np.array([mp.mpf(v) for v in values], dtype=object)
