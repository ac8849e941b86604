"""Spin-orbit vector fields with tidal torque, Kepler solver and averaged coefficients.

Units: mean motion 1, orbital period 2 pi, semimajor axis ``a = 1`` (only
ratios ``a/r`` occur).  ``q = a/r = 1/(1 - e cos u)`` with ``u`` the eccentric
anomaly.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import mpmath
from mpmath import mp

from .numerics import PrecisionError, eps_digits, scalar


class Variant(str, enum.Enum):
    NON_AVERAGED = "nonaveraged"
    AVERAGED = "averaged"


@dataclass(frozen=True)
class ModelParams:
    """Oblateness ``eps``, eccentricity ``ecc`` (the drift) and dissipation ``mu``."""

    eps: mpmath.mpf
    ecc: mpmath.mpf
    mu: mpmath.mpf
    variant: Variant = Variant.NON_AVERAGED

    def __post_init__(self):
        object.__setattr__(self, "eps", scalar(self.eps))
        object.__setattr__(self, "ecc", scalar(self.ecc))
        object.__setattr__(self, "mu", scalar(self.mu))
        object.__setattr__(self, "variant", Variant(self.variant))
        if not 0 <= self.ecc < 1:
            raise ValueError(f"eccentricity must lie in [0, 1), got {self.ecc}")
        if self.mu < 0 or self.eps < 0:
            raise ValueError("eps and mu must be non-negative")

    @property
    def lam(self) -> mpmath.mpf:
        return conformal_factor(self.ecc, self.mu)

    def replace(self, **changes) -> "ModelParams":
        fields = dict(eps=self.eps, ecc=self.ecc, mu=self.mu, variant=self.variant)
        fields.update(changes)
        return ModelParams(**fields)


def solve_kepler(t, ecc, max_iter: int = 200) -> mpmath.mpf:
    """Eccentric anomaly ``u`` with ``u - e sin u = t`` (damped Newton)."""
    t = mp.mpf(t)
    e = mp.mpf(ecc)
    if not 0 <= e < 1:
        raise ValueError("eccentricity must lie in [0, 1)")
    if e == 0:
        return t
    tol = eps_digits(5) * max(1, abs(t))
    u = t
    for _ in range(max_iter):
        s, c = mp.sin(u), mp.cos(u)
        f = u - e * s - t
        if abs(f) < tol:
            return u
        step = f / (1 - e * c)
        # keep u within [t - e, t + e], where the root lives
        if abs(step) > 1:
            step = mp.sign(step)
        u = min(max(u - step, t - e), t + e)
    raise PrecisionError("Kepler iteration did not converge; check the working precision")


def true_anomaly_trig(u, ecc) -> tuple:
    """``(cos f, sin f)`` of the true anomaly for eccentric anomaly ``u``."""
    u = mp.mpf(u)
    e = mp.mpf(ecc)
    cu, su = mp.cos(u), mp.sin(u)
    den = 1 - e * cu
    return (cu - e) / den, mp.sqrt(1 - e * e) * su / den


def lbar_nbar(ecc) -> tuple:
    """Orbit averages of the tidal torque coefficients, exact in ``e``."""
    e2 = mp.mpf(ecc) ** 2
    one_m = 1 - e2
    lbar = (1 + 3 * e2 + mp.mpf(3) / 8 * e2**2) / one_m ** mp.mpf(4.5)
    nbar = (1 + mp.mpf(15) / 2 * e2 + mp.mpf(45) / 8 * e2**2 + mp.mpf(5) / 16 * e2**3) / one_m**6
    return lbar, nbar


def lbar_nbar_de(ecc) -> tuple:
    """Derivatives of ``lbar_nbar`` with respect to ``e``."""
    e = mp.mpf(ecc)
    e2 = e * e
    one_m = 1 - e2
    pl = 1 + 3 * e2 + mp.mpf(3) / 8 * e2**2
    pn = 1 + mp.mpf(15) / 2 * e2 + mp.mpf(45) / 8 * e2**2 + mp.mpf(5) / 16 * e2**3
    dpl = 6 * e + mp.mpf(3) / 2 * e**3
    dpn = 15 * e + mp.mpf(45) / 2 * e**3 + mp.mpf(15) / 8 * e**5
    dl = dpl / one_m ** mp.mpf(4.5) + pl * 9 * e / one_m ** mp.mpf(5.5)
    dn = dpn / one_m**6 + pn * 12 * e / one_m**7
    return dl, dn


def conformal_factor(ecc, mu) -> mpmath.mpf:
    """Contraction factor of the period map: ``det DP = lambda``."""
    e2 = mp.mpf(ecc) ** 2
    mu = mp.mpf(mu)
    return mp.exp(-mu * mp.pi * (3 * e2**2 + 24 * e2 + 8) / (4 * (1 - e2) ** mp.mpf(4.5)))


def vector_field(state, u, params: ModelParams) -> tuple:
    """Right-hand side with the eccentric anomaly ``u`` as independent variable.

    Non-averaged: state ``(beta, gamma, s, c)`` with ``beta(u) = x(t(u))``,
    ``gamma = d beta/du = (r/a) y`` and ``s + i c = exp(i(2 beta - 2 f))`` up to
    the usual sin/cos split.  Averaged: state ``(x, y, s, c)``.
    """
    e, eps, mu = params.ecc, params.eps, params.mu
    u = mp.mpf(u)
    cu, su = mp.cos(u), mp.sin(u)
    w = 1 - e * cu
    q = 1 / w
    rt = mp.sqrt(1 - e * e)
    dfdu = rt * q
    a, b, s, c = (mp.mpf(v) for v in state)
    if params.variant is Variant.NON_AVERAGED:
        g = 2 * (b - dfdu)
        db = q * e * su * b - eps * q * s - mu * q**5 * (b - rt * q)
        return b, db, g * c, -g * s
    lbar, nbar = lbar_nbar(e)
    g = 2 * (b * w - dfdu)
    dy = -eps * q**2 * s - mu * (lbar * b - nbar) * w
    return b * w, dy, g * c, -g * s


def vector_field_time(state, t, params: ModelParams) -> tuple:
    """Time-form right-hand side for ``(x, y, s, c)``, ``s = sin(2x - 2f(t))``."""
    e, eps, mu = params.ecc, params.eps, params.mu
    u = solve_kepler(t, e)
    q = 1 / (1 - e * mp.cos(u))
    fdot = q**2 * mp.sqrt(1 - e * e)
    x, y, s, c = (mp.mpf(v) for v in state)
    if params.variant is Variant.NON_AVERAGED:
        torque = -mu * q**6 * (y - fdot)
    else:
        lbar, nbar = lbar_nbar(e)
        torque = -mu * (lbar * y - nbar)
    g = 2 * (y - fdot)
    return y, -eps * q**3 * s + torque, g * c, -g * s
