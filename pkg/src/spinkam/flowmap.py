"""Taylor integrator with first-order jet transport and the period-2pi map.

The integrator works on whole batches of initial conditions at once.  All
arithmetic in the hot loop is binary fixed point on Python integers (scale
``2**F`` with ``F`` a few guard bits above the working precision), stored in
numpy object arrays so every recurrence is one vectorized operation over the
batch.  Each point carries its own step sequence, so results do not depend on
how a batch is split across workers.

Both variants are integrated in the eccentric anomaly ``u`` over ``[0, 2 pi]``
(``t = 2 pi`` exactly when ``u = 2 pi``).  Jets are degree one in the seed
variables ``(x0, y0, e)``.
"""
from __future__ import annotations

import concurrent.futures
import math
import os
from dataclasses import dataclass

import mpmath
import numpy as np
from mpmath import libmp, mp

from .model import ModelParams, Variant, conformal_factor, lbar_nbar, lbar_nbar_de

GUARD_BITS = 24
LIMB_GUARD_BITS = 20
MIN_STEP = 1e-15

VAL, DX, DY, DE = range(4)


class IntegrationError(RuntimeError):
    """Step underflow or step budget exhausted."""


@dataclass
class Jet:
    value: mpmath.mpf
    d_x0: mpmath.mpf = mp.zero
    d_y0: mpmath.mpf = mp.zero
    d_e: mpmath.mpf = mp.zero

    def parts(self):
        return (self.value, self.d_x0, self.d_y0, self.d_e)


@dataclass
class TaylorConfig:
    order: int
    abs_tol: mpmath.mpf
    rel_tol: mpmath.mpf
    max_steps: int = 100_000
    backend: str = "compiled"

    def __post_init__(self):
        if self.order < 4:
            raise ValueError("Taylor order must be at least 4")
        self.abs_tol = mp.mpf(self.abs_tol)
        self.rel_tol = mp.mpf(self.rel_tol)
        if self.abs_tol <= 0 or self.rel_tol <= 0:
            raise ValueError("tolerances must be positive")
        if self.backend not in ("compiled", "python"):
            raise ValueError(f"unknown backend {self.backend!r}")

    @classmethod
    def for_precision(cls, digits: int | None = None, tol=None) -> "TaylorConfig":
        digits = mp.dps if digits is None else digits
        order = min(math.ceil(digits * math.log(10) / 2), 40)
        tol = mp.mpf(10) ** (-digits) if tol is None else mp.mpf(tol)
        return cls(order=max(order, 4), abs_tol=tol, rel_tol=tol)


@dataclass
class MapResult:
    x: Jet
    y: Jet

    def differential(self):
        """2x2 block of partials with respect to ``(x0, y0)``."""
        return [[self.x.d_x0, self.x.d_y0], [self.y.d_x0, self.y.d_y0]]


# --- fixed point helpers -------------------------------------------------------

def _frac_bits() -> int:
    return mp.prec + GUARD_BITS


def _to_fix(x, F: int) -> int:
    return libmp.to_fixed(mp.mpf(x)._mpf_, F)


def _from_fix(n: int, F: int) -> mpmath.mpf:
    return mp.mpf((int(n), -F))


def _float_to_fix(h: float, F: int) -> int:
    m, ex = math.frexp(h)
    mi = int(m * (1 << 53))
    sh = F + ex - 53
    return mi << sh if sh >= 0 else mi >> -sh


def _fix_log2(n: int, F: int) -> float:
    return math.log2(n) - F


def _cos_sin_fix(u: np.ndarray, F: int):
    cu = np.empty(len(u), dtype=object)
    su = np.empty(len(u), dtype=object)
    for i, ui in enumerate(u):
        c, s = libmp.mpf_cos_sin(libmp.from_man_exp(int(ui), -F), F + 8)
        cu[i] = libmp.to_fixed(c, F)
        su[i] = libmp.to_fixed(s, F)
    return cu, su


def _conv(a: np.ndarray, b: np.ndarray, k: int):
    """Order-k Cauchy product coefficient, still scaled by 2**(2F)."""
    return (a[: k + 1] * b[k::-1]).sum(axis=0)


def _conv_all(a: np.ndarray, b: np.ndarray, F: int) -> np.ndarray:
    out = np.empty_like(a)
    for k in range(a.shape[0]):
        out[k] = _conv(a, b, k) >> F
    return out


class _Engine:
    """Fixed-point Taylor stepper for one parameter set and one configuration."""

    def __init__(self, params: ModelParams, config: TaylorConfig, jets: bool = True):
        self.params = params
        self.config = config
        self.jets = jets
        self.F = F = _frac_bits()
        self.N = config.order
        self.one = 1 << F
        e = params.ecc
        self.E = _to_fix(e, F)
        self.EPS = _to_fix(params.eps, F)
        self.MU = _to_fix(params.mu, F)
        rt = mp.sqrt(1 - e * e)
        self.RT = _to_fix(rt, F)
        self.RTe = _to_fix(-e / rt, F)
        self.MURT = _to_fix(params.mu * rt, F)
        self.MURTe = _to_fix(-params.mu * e / rt, F)
        lbar, nbar = lbar_nbar(e)
        dl, dn = lbar_nbar_de(e)
        self.MULB = _to_fix(params.mu * lbar, F)
        self.MUNB = _to_fix(params.mu * nbar, F)
        self.MULBe = _to_fix(params.mu * dl, F)
        self.MUNBe = _to_fix(params.mu * dn, F)
        self.inv_fact = [_to_fix(1 / mp.factorial(k), F) for k in range(self.N + 1)]
        self.two_pi = _to_fix(2 * mp.pi, F)
        self.log2_abs = float(mp.log(config.abs_tol, 2))
        self.log2_rel = float(mp.log(config.rel_tol, 2))
        self.ncomp = 16 if jets else 4
        self.averaged = params.variant is Variant.AVERAGED

    # known functions of u --------------------------------------------------
    def _trig_series(self, u0):
        F, N = self.F, self.N
        n = len(u0)
        c0, s0 = _cos_sin_fix(u0, F)
        cu = np.empty((N + 1, n), dtype=object)
        su = np.empty((N + 1, n), dtype=object)
        cpat = (c0, -s0, -c0, s0)
        spat = (s0, c0, -s0, -c0)
        for k in range(N + 1):
            f = self.inv_fact[k]
            cu[k] = (cpat[k % 4] * f) >> F
            su[k] = (spat[k % 4] * f) >> F
        return cu, su

    def _powers(self, w, q0, alphas):
        """Series of ``w**alpha`` for negative integer alphas (J.C.P. Miller rule)."""
        F, N = self.F, self.N
        out = {}
        for a in alphas:
            p = np.empty_like(w)
            p0 = q0
            for _ in range(-a - 1):
                p0 = (p0 * q0) >> F
            p[0] = p0
            out[a] = p
        for k in range(1, N + 1):
            wrev = w[k:0:-1]
            for a, p in out.items():
                wts = np.array([a * (k - j) - j for j in range(k)], dtype=object)[:, None]
                acc = (wts * wrev * p[:k]).sum(axis=0) >> F
                p[k] = ((acc * q0) >> F) // k
        return out

    def _known(self, u0):
        F = self.F
        cu, su = self._trig_series(u0)
        w = -((self.E * cu) >> F)
        w[0] = w[0] + self.one
        q0 = (self.one << F) // w[0]
        jets = self.jets
        kn = {"cu": cu}
        if not self.averaged:
            pw = self._powers(w, q0, (-1, -5, -6))
            q, q5, q6 = pw[-1], pw[-5], pw[-6]
            sq = _conv_all(su, q, F)
            kn["A"] = ((self.E * sq) >> F) - ((self.MU * q5) >> F)
            kn["C"] = (self.EPS * q) >> F
            kn["D"] = (self.RT * q) >> F
            kn["B"] = (self.MURT * q6) >> F
            if jets:
                r = _conv_all(cu, q, F)
                q1e = _conv_all(r, q, F)
                q5e = 5 * _conv_all(r, q5, F)
                q6e = 6 * _conv_all(r, q6, F)
                sqe = _conv_all(su, q1e, F)
                kn["Ae"] = sq + ((self.E * sqe) >> F) - ((self.MU * q5e) >> F)
                kn["Ce"] = (self.EPS * q1e) >> F
                kn["De"] = ((self.RTe * q) >> F) + ((self.RT * q1e) >> F)
                kn["Be"] = ((self.MURTe * q6) >> F) + ((self.MURT * q6e) >> F)
        else:
            pw = self._powers(w, q0, (-1, -2))
            q, q2 = pw[-1], pw[-2]
            kn["w"] = w
            kn["Q2"] = q2
            kn["D"] = (self.RT * q) >> F
            if jets:
                r = _conv_all(cu, q, F)
                q1e = _conv_all(r, q, F)
                kn["we"] = -cu
                kn["Q2e"] = 2 * _conv_all(r, q2, F)
                kn["De"] = ((self.RTe * q) >> F) + ((self.RT * q1e) >> F)
        return kn

    # state recursion ---------------------------------------------------------
    def _series(self, state: np.ndarray, u0: np.ndarray):
        """Taylor coefficients of all state components (shape ncomp, N+1, n)."""
        N = self.N
        n = state.shape[1]
        kn = self._known(u0)
        X = np.empty((self.ncomp, N + 1, n), dtype=object)
        X[:, 0, :] = state
        if self.averaged:
            self._recur_averaged(X, kn)
        else:
            self._recur_nonaveraged(X, kn)
        return X

    def _recur_nonaveraged(self, X, kn):
        F, N, jets = self.F, self.N, self.jets
        np_ = 4 if jets else 1
        b, g, s, c = (X[np_ * i: np_ * (i + 1)] for i in range(4))
        A, C, D, Bt = kn["A"], kn["C"], kn["D"], kn["B"]
        G = np.empty((np_,) + X.shape[1:], dtype=object)
        if jets:
            Ae, Ce, De, Bte = kn["Ae"], kn["Ce"], kn["De"], kn["Be"]
        for k in range(N):
            G[0, k] = 2 * (g[0, k] - D[k])
            if jets:
                G[1, k] = 2 * g[1, k]
                G[2, k] = 2 * g[2, k]
                G[3, k] = 2 * (g[3, k] - De[k])
            k1 = k + 1
            ag = _conv(A, g[0], k)
            cs = _conv(C, s[0], k)
            gc = _conv(G[0], c[0], k)
            gs = _conv(G[0], s[0], k)
            b[0, k1] = g[0, k] // k1
            g[0, k1] = (((ag - cs) >> F) + Bt[k]) // k1
            s[0, k1] = (gc >> F) // k1
            c[0, k1] = -((gs >> F) // k1)
            if not jets:
                continue
            for p in (DX, DY, DE):
                ag = _conv(A, g[p], k)
                cs = _conv(C, s[p], k)
                gc = _conv(G[0], c[p], k) + _conv(G[p], c[0], k)
                gs = _conv(G[0], s[p], k) + _conv(G[p], s[0], k)
                if p == DE:
                    ag = ag + _conv(Ae, g[0], k)
                    cs = cs + _conv(Ce, s[0], k)
                b[p, k1] = g[p, k] // k1
                tail = Bte[k] if p == DE else 0
                g[p, k1] = (((ag - cs) >> F) + tail) // k1
                s[p, k1] = (gc >> F) // k1
                c[p, k1] = -((gs >> F) // k1)

    def _recur_averaged(self, X, kn):
        F, N, jets = self.F, self.N, self.jets
        np_ = 4 if jets else 1
        x, y, s, c = (X[np_ * i: np_ * (i + 1)] for i in range(4))
        w, Q2, D = kn["w"], kn["Q2"], kn["D"]
        G = np.empty((np_,) + X.shape[1:], dtype=object)
        WY = np.empty((np_,) + X.shape[1:], dtype=object)
        if jets:
            we, Q2e, De = kn["we"], kn["Q2e"], kn["De"]
        for k in range(N):
            k1 = k + 1
            WY[0, k] = _conv(w, y[0], k) >> F
            if jets:
                WY[1, k] = _conv(w, y[1], k) >> F
                WY[2, k] = _conv(w, y[2], k) >> F
                WY[3, k] = (_conv(w, y[3], k) + _conv(we, y[0], k)) >> F
            G[0, k] = 2 * (WY[0, k] - D[k])
            if jets:
                G[1, k] = 2 * WY[1, k]
                G[2, k] = 2 * WY[2, k]
                G[3, k] = 2 * (WY[3, k] - De[k])
            qs = _conv(Q2, s[0], k) >> F
            gc = _conv(G[0], c[0], k)
            gs = _conv(G[0], s[0], k)
            x[0, k1] = WY[0, k] // k1
            y[0, k1] = (-((self.EPS * qs) >> F) - ((self.MULB * WY[0, k]) >> F)
                        + ((self.MUNB * w[k]) >> F)) // k1
            s[0, k1] = (gc >> F) // k1
            c[0, k1] = -((gs >> F) // k1)
            if not jets:
                continue
            for p in (DX, DY, DE):
                qs = _conv(Q2, s[p], k)
                gc = _conv(G[0], c[p], k) + _conv(G[p], c[0], k)
                gs = _conv(G[0], s[p], k) + _conv(G[p], s[0], k)
                dy = -((self.MULB * WY[p, k]) >> F)
                if p == DE:
                    qs = qs + _conv(Q2e, s[0], k)
                    dy = (dy - ((self.MULBe * WY[0, k]) >> F)
                          + ((self.MUNB * we[k]) >> F) + ((self.MUNBe * w[k]) >> F))
                x[p, k1] = WY[p, k] // k1
                y[p, k1] = (dy - ((self.EPS * (qs >> F)) >> F)) // k1
                s[p, k1] = (gc >> F) // k1
                c[p, k1] = -((gs >> F) // k1)

    # stepping ------------------------------------------------------------------
    def _log_norms(self, X):
        F, N = self.F, self.N
        out = []
        for order in (0, N - 1, N):
            nm = np.abs(X[:, order, :]).max(axis=0)
            out.append([_fix_log2(v, F) if v > 0 else -math.inf for v in nm])
        return np.array(out).T

    def step(self, state: np.ndarray, u: np.ndarray, u_end: int | None = None):
        """One Taylor step for every column of ``state``; returns (state, h)."""
        F = self.F
        X = self._series(state, u)
        hfix = _choose_steps(self._log_norms(X), self, u, u_end)
        new = X[:, self.N, :]
        for k in range(self.N - 1, -1, -1):
            new = ((new * hfix) >> F) + X[:, k, :]
        return new, hfix

    def integrate(self, state: np.ndarray, u_start: int = 0, u_end: int | None = None) -> np.ndarray:
        return _integrate(self, state, u_start, u_end)


def _choose_steps(log_norms, eng, u, u_end):
    """Per-point step from the last two Taylor coefficients (log2 norms)."""
    N, F = eng.N, eng.F
    hfix = np.empty(len(log_norms), dtype=object)
    for i, (l0, la, lb) in enumerate(log_norms):
        lt = max(eng.log2_abs, eng.log2_rel + l0)
        h = math.inf
        for m, lm in ((N - 1, la), (N, lb)):
            if lm > -math.inf:
                h = min(h, 2.0 ** ((lt - lm) / m))
        if h < MIN_STEP:
            raise IntegrationError(f"step size underflow ({h:.3e})")
        hf = _float_to_fix(min(h, 8.0), F)
        if u_end is not None:
            hf = min(hf, u_end - int(u[i]))
        hfix[i] = hf
    return hfix


def _integrate(eng, state, u_start=0, u_end=None):
    u_end = eng.two_pi if u_end is None else u_end
    n = state.shape[1]
    u = np.full(n, u_start, dtype=object)
    state = state.copy()
    steps = 0
    active = np.array([int(ui) < u_end for ui in u])
    while active.any():
        idx = np.nonzero(active)[0]
        new, h = eng.step(state[:, idx], u[idx], u_end)
        state[:, idx] = new
        u[idx] = u[idx] + h
        steps += 1
        if steps > eng.config.max_steps:
            raise IntegrationError("maximum number of Taylor steps exceeded")
        active = np.array([int(ui) < u_end for ui in u])
    return state


class _LimbEngine:
    """Same recurrences as ``_Engine``, run by the compiled limb kernels."""

    def __init__(self, params: ModelParams, config: TaylorConfig, jets: bool = True):
        from . import _limbs

        self.lib = _limbs
        self.params = params
        self.config = config
        self.jets = jets
        self.N = config.order
        self.FL = -(-(mp.prec + LIMB_GUARD_BITS) // _limbs.BITS)
        self.NL = self.FL + 1
        self.F = F = _limbs.BITS * self.FL
        self.averaged = params.variant is Variant.AVERAGED
        self.ncomp = 16 if jets else 4
        e, mu = params.ecc, params.mu
        rt = mp.sqrt(1 - e * e)
        lbar, nbar = lbar_nbar(e)
        dl, dn = lbar_nbar_de(e)
        vals = [1, e, params.eps, mu, rt, -e / rt, mu * rt, -mu * e / rt,
                mu * lbar, mu * nbar, mu * dl, mu * dn]
        self.E = _to_fix(e, F)
        self.consts = self._limbs_of([_to_fix(v, F) for v in vals])
        self.inv_fact = self._limbs_of([_to_fix(1 / mp.factorial(k), F) for k in range(self.N + 1)])
        self.two_pi = _to_fix(2 * mp.pi, F)
        self.log2_abs = float(mp.log(config.abs_tol, 2))
        self.log2_rel = float(mp.log(config.rel_tol, 2))

    def _limbs_of(self, ints):
        return self.lib.pack(ints, self.NL)

    def _broadcast(self, limbs, n):
        return np.ascontiguousarray(np.broadcast_to(limbs.T[:, :, None], limbs.T.shape + (n,)))

    def _expansion_data(self, u):
        F = self.F
        one = 1 << F
        c0s, s0s, qps = [], [], ([], [], [])
        for ui in u:
            c, s = libmp.mpf_cos_sin(libmp.from_man_exp(int(ui), -F), F + 8)
            cf, sf = libmp.to_fixed(c, F), libmp.to_fixed(s, F)
            w0 = one - ((self.E * cf) >> F)
            q0 = (one << F) // w0
            q2 = (q0 * q0) >> F
            if self.averaged:
                pw = (q0, q2, 0)
            else:
                q5 = (((q2 * q2) >> F) * q0) >> F
                pw = (q0, q5, (q5 * q0) >> F)
            for lst, v in zip(qps, pw):
                lst.append(v)
            c0s.append(cf)
            s0s.append(sf)
        qp = np.stack([self._limbs_of(lst) for lst in qps])
        return self._limbs_of(c0s), self._limbs_of(s0s), qp

    def step(self, state, u, u_end=None):
        lib = self.lib
        n = state.shape[2]
        c0, s0, qp = self._expansion_data(u)
        X, norms, err = lib.taylor_series(state, c0, s0, qp, self._broadcast(self.consts, n),
                                          self._broadcast(self.inv_fact, n),
                                          self.FL, self.averaged, self.jets)
        if err:
            raise OverflowError("limb range exceeded")
        hfix = _choose_steps(norms.T, self, u, u_end)
        new, err = lib.horner(X, self._limbs_of(hfix), self.FL)
        if err:
            raise OverflowError("limb range exceeded")
        return new, hfix

    def integrate(self, state: np.ndarray, u_start: int = 0, u_end: int | None = None) -> np.ndarray:
        """``state`` is (ncomp, n) fixed-point ints, as for ``_Engine``."""
        ncomp, n = state.shape
        limbs = np.stack([self._limbs_of(state[c]) for c in range(ncomp)])
        u_end = self.two_pi if u_end is None else u_end
        u = np.full(n, u_start, dtype=object)
        steps = 0
        active = np.array([int(ui) < u_end for ui in u])
        while active.any():
            idx = np.nonzero(active)[0]
            sub = limbs if len(idx) == n else np.ascontiguousarray(limbs[:, :, idx])
            new, h = self.step(sub, u[idx], u_end)
            limbs[:, :, idx] = new
            u[idx] = u[idx] + h
            steps += 1
            if steps > self.config.max_steps:
                raise IntegrationError("maximum number of Taylor steps exceeded")
            active = np.array([int(ui) < u_end for ui in u])
        out = np.empty((ncomp, n), dtype=object)
        for c in range(ncomp):
            out[c] = self.lib.unpack(limbs[c])
        return out


def _make_engine(params, config, jets):
    if config.backend == "python":
        return _Engine(params, config, jets=jets)
    return _LimbEngine(params, config, jets=jets)


# --- public API --------------------------------------------------------------

def _initial_state(x0: np.ndarray, y0: np.ndarray, params: ModelParams, jets: bool, F: int) -> np.ndarray:
    """Fixed-point initial conditions (with seed jets) for a batch of points."""
    n = len(x0)
    e = params.ecc
    ncomp = 16 if jets else 4
    st = np.zeros((ncomp, n), dtype=object)
    np_ = 4 if jets else 1
    one = 1 << F
    om = _to_fix(1 - e, F)
    for i in range(n):
        x, y = mp.mpf(x0[i]), mp.mpf(y0[i])
        c2, s2 = mp.cos_sin(2 * x)
        xf, yf = _to_fix(x, F), _to_fix(y, F)
        sf, cf = _to_fix(s2, F), _to_fix(c2, F)
        st[0, i] = xf
        st[2 * np_, i] = sf
        st[3 * np_, i] = cf
        if params.variant is Variant.AVERAGED:
            st[np_, i] = yf
        else:
            st[np_, i] = _to_fix((1 - e) * y, F)
        if jets:
            st[DX, i] = one
            st[2 * np_ + DX, i] = 2 * cf
            st[3 * np_ + DX, i] = -2 * sf
            if params.variant is Variant.AVERAGED:
                st[np_ + DY, i] = one
            else:
                st[np_ + DY, i] = om
                st[np_ + DE, i] = -yf
    return st


@dataclass
class GridMap:
    """Period map of a batch of points; arrays of working-precision scalars.

    ``dx``/``dy`` hold the partials of the image coordinates with respect to
    ``(x0, y0, e)`` (columns) when jets were requested.
    """

    x: np.ndarray
    y: np.ndarray
    dx: np.ndarray | None = None
    dy: np.ndarray | None = None
    s: np.ndarray | None = None
    c: np.ndarray | None = None


def _map_chunk(args):
    digits, x0, y0, params, config, jets = args
    with mp.workdps(digits):
        return _poincare_batch(x0, y0, params, config, jets)


def _poincare_batch(x0, y0, params, config, jets):
    eng = _make_engine(params, config, jets)
    F = eng.F
    st = _initial_state(x0, y0, params, jets, F)
    try:
        st = eng.integrate(st)
    except OverflowError:
        eng = _Engine(params, config, jets=jets)
        F = eng.F
        st = eng.integrate(_initial_state(x0, y0, params, jets, F))
    np_ = 4 if jets else 1
    n = len(x0)
    conv = np.vectorize(lambda v: _from_fix(v, F), otypes=[object])
    vals = conv(st) if n else st
    x = vals[0]
    if params.variant is Variant.AVERAGED:
        y = vals[np_]
        yj = vals[np_: 2 * np_]
    else:
        om = 1 - params.ecc
        y = vals[np_] / om
        yj = vals[np_: 2 * np_] / om
        if jets:
            yj[DE] = yj[DE] + vals[np_] / om**2
    gm = GridMap(x=x, y=y, s=vals[2 * np_], c=vals[3 * np_])
    if jets:
        gm.dx = np.stack([vals[DX], vals[DY], vals[DE]], axis=1)
        gm.dy = np.stack([yj[DX], yj[DY], yj[DE]], axis=1)
    return gm


def default_workers() -> int:
    env = os.environ.get("SPINKAM_WORKERS")
    return max(1, int(env)) if env else 1


def poincare_map_grid(x0, y0, params: ModelParams, config: TaylorConfig | None = None,
                      jets: bool = True, workers: int | None = None) -> GridMap:
    """Period map ``P_e`` at a batch of physical points ``(x0, y0)``.

    The first image coordinate is the lifted angle (never reduced mod 2 pi).
    """
    config = config or TaylorConfig.for_precision()
    x0 = np.asarray(list(x0), dtype=object)
    y0 = np.asarray(list(y0), dtype=object)
    workers = default_workers() if workers is None else workers
    n = len(x0)
    if workers <= 1 or n < 2 * workers:
        return _poincare_batch(x0, y0, params, config, jets)
    bounds = np.linspace(0, n, workers + 1).astype(int)
    tasks = [(mp.dps, x0[a:b], y0[a:b], params, config, jets) for a, b in zip(bounds[:-1], bounds[1:])]
    with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(_map_chunk, tasks))
    cat = lambda name: np.concatenate([getattr(p, name) for p in parts])
    gm = GridMap(x=cat("x"), y=cat("y"), s=cat("s"), c=cat("c"))
    if jets:
        gm.dx, gm.dy = cat("dx"), cat("dy")
    return gm


def poincare_map(x0, y0, params: ModelParams, config: TaylorConfig | None = None) -> MapResult:
    gm = poincare_map_grid([x0], [y0], params, config, jets=True, workers=1)
    x = Jet(gm.x[0], *gm.dx[0])
    y = Jet(gm.y[0], *gm.dy[0])
    return MapResult(x=x, y=y)


def taylor_step(state, u0, config: TaylorConfig, params: ModelParams):
    """Single adaptive step of the augmented system from ``u = u0``.

    ``state`` is four :class:`Jet` objects (``beta, gamma, s, c`` or
    ``x, y, s, c`` for the averaged variant).  Returns the advanced jets and
    the step length.
    """
    F = _frac_bits()
    eng = _Engine(params, config, jets=True)
    st = np.zeros((16, 1), dtype=object)
    for i, jet in enumerate(state):
        for p, v in enumerate(jet.parts()):
            st[4 * i + p, 0] = _to_fix(v, F)
    new, h = eng.step(st, np.array([_to_fix(u0, F)], dtype=object))
    jets_out = [Jet(*(_from_fix(new[4 * i + p, 0], F) for p in range(4))) for i in range(4)]
    return jets_out, _from_fix(h[0], F)


def conformality_check(x0, y0, params: ModelParams, config: TaylorConfig | None = None) -> mpmath.mpf:
    """``max |D^T J D - lambda J|`` for the (x0, y0) block of the differential."""
    res = poincare_map(x0, y0, params, config)
    (a, b), (c, d) = res.differential()
    lam = conformal_factor(params.ecc, params.mu)
    # D^T J D = det(D) J for 2x2 matrices
    return abs(a * d - b * c - lam)


# --- double precision orbits ------------------------------------------------

def _orbit_kernel():
    import numba

    @numba.njit(cache=True)
    def powers(w, q0, alpha, N):
        p = np.empty(N + 1)
        p[0] = q0 ** (-alpha)
        for k in range(1, N + 1):
            acc = 0.0
            for j in range(k):
                acc += (alpha * (k - j) - j) * w[k - j] * p[j]
            p[k] = acc * q0 / k
        return p

    @numba.njit(cache=True)
    def orbit(x0, y0, eps, e, mu, averaged, lbar, nbar, n_skip, n_store, N, tol):
        rt = np.sqrt(1.0 - e * e)
        two_pi = 2.0 * np.pi
        out = np.empty(n_store)
        fact = np.empty(N + 1)
        fact[0] = 1.0
        for k in range(1, N + 1):
            fact[k] = fact[k - 1] * k
        X = np.empty((4, N + 1))
        cu = np.empty(N + 1)
        su = np.empty(N + 1)
        w = np.empty(N + 1)
        G = np.empty(N + 1)
        WY = np.empty(N + 1)
        A = np.empty(N + 1)
        a = x0
        b = y0 if averaged else (1.0 - e) * y0
        s = np.sin(2.0 * x0)
        c = np.cos(2.0 * x0)
        total = n_skip + n_store
        for it in range(total):
            u = 0.0
            while u < two_pi:
                c0 = np.cos(u)
                s0 = np.sin(u)
                for k in range(N + 1):
                    m = k % 4
                    if m == 0:
                        cu[k] = c0
                        su[k] = s0
                    elif m == 1:
                        cu[k] = -s0
                        su[k] = c0
                    elif m == 2:
                        cu[k] = -c0
                        su[k] = -s0
                    else:
                        cu[k] = s0
                        su[k] = -c0
                    cu[k] /= fact[k]
                    su[k] /= fact[k]
                    w[k] = -e * cu[k]
                w[0] += 1.0
                q0 = 1.0 / w[0]
                q = powers(w, q0, -1, N)
                X[0, 0] = a
                X[1, 0] = b
                X[2, 0] = s
                X[3, 0] = c
                if not averaged:
                    q5 = powers(w, q0, -5, N)
                    q6 = powers(w, q0, -6, N)
                    for k in range(N + 1):
                        sq = 0.0
                        for j in range(k + 1):
                            sq += su[j] * q[k - j]
                        A[k] = e * sq - mu * q5[k]
                    for k in range(N):
                        G[k] = 2.0 * (X[1, k] - rt * q[k])
                        ag = 0.0
                        cs = 0.0
                        gc = 0.0
                        gs = 0.0
                        for j in range(k + 1):
                            ag += A[j] * X[1, k - j]
                            cs += eps * q[j] * X[2, k - j]
                            gc += G[j] * X[3, k - j]
                            gs += G[j] * X[2, k - j]
                        X[0, k + 1] = X[1, k] / (k + 1)
                        X[1, k + 1] = (ag - cs + mu * rt * q6[k]) / (k + 1)
                        X[2, k + 1] = gc / (k + 1)
                        X[3, k + 1] = -gs / (k + 1)
                else:
                    q2 = powers(w, q0, -2, N)
                    for k in range(N):
                        wy = 0.0
                        for j in range(k + 1):
                            wy += w[j] * X[1, k - j]
                        WY[k] = wy
                        G[k] = 2.0 * (wy - rt * q[k])
                        qs = 0.0
                        gc = 0.0
                        gs = 0.0
                        for j in range(k + 1):
                            qs += q2[j] * X[2, k - j]
                            gc += G[j] * X[3, k - j]
                            gs += G[j] * X[2, k - j]
                        X[0, k + 1] = wy / (k + 1)
                        X[1, k + 1] = (-eps * qs - mu * (lbar * wy - nbar * w[k])) / (k + 1)
                        X[2, k + 1] = gc / (k + 1)
                        X[3, k + 1] = -gs / (k + 1)
                n0 = max(abs(X[0, 0]), abs(X[1, 0]), abs(X[2, 0]), abs(X[3, 0]))
                t = max(tol, tol * n0)
                h = 1e300
                for m in (N - 1, N):
                    nm = max(abs(X[0, m]), abs(X[1, m]), abs(X[2, m]), abs(X[3, m]))
                    if nm > 0:
                        hm = (t / nm) ** (1.0 / m)
                        if hm < h:
                            h = hm
                if h > 8.0:
                    h = 8.0
                if u + h >= two_pi:
                    h = two_pi - u
                    u = two_pi
                else:
                    u += h
                for v in range(4):
                    acc = X[v, N]
                    for k in range(N - 1, -1, -1):
                        acc = acc * h + X[v, k]
                    X[v, 0] = acc
                a, b, s, c = X[0, 0], X[1, 0], X[2, 0], X[3, 0]
                # renormalise the phase pair; only its angle is meaningful
                r = np.sqrt(s * s + c * c)
                s /= r
                c /= r
            if it >= n_skip:
                out[it - n_skip] = b
        return out, a, b

    return orbit


_ORBIT = None


def orbit_gammas_double(x0, y0, params: ModelParams, n_skip: int, n_store: int,
                        order: int = 20, tol: float = 1e-16):
    """Double-precision orbit of the period map.

    Returns the second state component at ``u = 2 pi j`` for
    ``j = n_skip+1 .. n_skip+n_store`` (``gamma = (1-e) y`` for the
    non-averaged variant, ``y`` for the averaged one).
    """
    global _ORBIT
    if _ORBIT is None:
        _ORBIT = _orbit_kernel()
    lbar, nbar = lbar_nbar(params.ecc)
    out, _, _ = _ORBIT(float(x0), float(y0), float(params.eps), float(params.ecc), float(params.mu),
                       params.variant is Variant.AVERAGED, float(lbar), float(nbar),
                       int(n_skip), int(n_store), int(order), float(tol))
    return out
