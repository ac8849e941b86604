"""Invariant attractors of the period map: Newton solver and continuation.

Tori live in normalized coordinates ``(X, Y) = (x, y) / (2 pi)``, so the angle
has period 1 and ``K(theta) = (theta + u(theta), K2(theta))`` with 1-periodic
``u`` and ``K2``.  The map ``P_e`` sends ``K(theta)`` to ``K(theta + omega)``
where ``omega`` is the rotation number (average spin rate).  Differentials are
unchanged by the scaling; ``dP/de`` picks up a factor ``1/(2 pi)``.

The Newton step uses the adapted frame ``M = [DK | J^-1 DK N]`` in which the
linearized map is upper triangular, ``DP(K) M = M(theta + omega) [[1, S],
[0, lambda]]`` up to the invariance error.  The correction then reduces to one
contractive and one neutral cohomological equation plus one scalar equation
for the eccentricity.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import mpmath
import numpy as np
from mpmath import mp

from . import flowmap
from .fourier import (FourierSeries, analyticity_width, parse_series_lines, series_lines,
                      sobolev_seminorm, solve_cohomology_contractive, solve_cohomology_neutral,
                      tail_fraction_norm)
from .model import ModelParams, Variant, conformal_factor, lbar_nbar
from .numerics import PrecisionError, eps_digits, format_scalar, kahan_sum, parse_scalar, scalar

log = logging.getLogger(__name__)

SEMINORM_ORDERS = tuple(range(1, 9))


class ConvergenceError(RuntimeError):
    """Newton iteration failed to reach the requested tolerance."""


class ContinuationStall(RuntimeError):
    """The continuation step fell below its minimum; ``last_eps`` is the breakdown estimate."""

    def __init__(self, message, last_eps, records):
        super().__init__(message)
        self.last_eps = last_eps
        self.records = records


def frequency(name: str) -> mpmath.mpf:
    """The two noble frequencies used throughout, at working precision."""
    s5 = mp.sqrt(5)
    if name == "omega1":
        return (s5 + 1) / 2
    if name == "omega2":
        return 1 + 1 / (2 + (s5 - 1) / 2)
    raise ValueError(f"unknown frequency {name!r}")


def frequency_from_continued_fraction(text: str, tail_terms: int | None = None) -> mpmath.mpf:
    """Evaluate ``[a0; a1, a2, ...]``; a trailing ``...`` means all further terms are 1."""
    body = text.strip()
    if not (body.startswith("[") and body.endswith("]")):
        raise ValueError(f"malformed continued fraction {text!r}")
    body = body[1:-1]
    noble = body.endswith("...")
    if noble:
        body = body[:-3].rstrip(", ")
    head, _, rest = body.partition(";")
    try:
        terms = [int(head)] + [int(t) for t in rest.split(",") if t.strip()]
    except ValueError as exc:
        raise ValueError(f"malformed continued fraction {text!r}") from exc
    if any(t <= 0 for t in terms[1:]):
        raise ValueError("partial quotients after the first must be positive")
    value = (mp.sqrt(5) + 1) / 2 if noble else None
    for t in reversed(terms):
        value = mp.mpf(t) if value is None else t + 1 / value
    return value


def drift_for_frequency(omega, lo=0, hi=mp.mpf("0.95")) -> mpmath.mpf:
    """Eccentricity with ``Nbar(e) / Lbar(e) = omega`` (the averaged attractor)."""
    omega = mp.mpf(omega)
    g = lambda e: lbar_nbar(e)[1] / lbar_nbar(e)[0] - omega
    lo, hi = mp.mpf(lo), mp.mpf(hi)
    if g(lo) * g(hi) > 0:
        raise ValueError(f"no drift in [{lo}, {hi}] gives frequency {omega}")
    return mp.findroot(g, (lo, hi), solver="anderson")


@dataclass
class TorusSolution:
    u: FourierSeries
    K2: FourierSeries
    ecc: mpmath.mpf
    omega: mpmath.mpf
    residual: mpmath.mpf
    lam: mpmath.mpf
    params: ModelParams
    evaluation: "TorusEvaluation | None" = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.ecc = mp.mpf(self.ecc)
        self.omega = mp.mpf(self.omega)
        if self.params.ecc != self.ecc:
            self.params = self.params.replace(ecc=self.ecc)
        if self.u.L != self.K2.L:
            raise ValueError("u and K2 must share one mesh")

    @property
    def L(self) -> int:
        return self.u.L

    @property
    def eps(self) -> mpmath.mpf:
        return self.params.eps

    def with_mesh(self, L: int) -> "TorusSolution":
        return replace(self, u=self.u.resize(L), K2=self.K2.resize(L), evaluation=None)


@dataclass
class ContinuationConfig:
    newton_tol: mpmath.mpf = mp.mpf("1e-35")
    tail_lo: mpmath.mpf = mp.mpf("1e-55")
    tail_hi: mpmath.mpf = mp.mpf("1e-28")
    L_max: int = 65536
    eps_step_init: mpmath.mpf = mp.mpf("1e-3")
    eps_step_min: mpmath.mpf = mp.mpf("1e-7")
    eps_step_max: mpmath.mpf = mp.mpf("2e-3")
    max_newton_iters: int = 10
    L_min: int = 16

    def __post_init__(self):
        for name in ("newton_tol", "tail_lo", "tail_hi", "eps_step_init", "eps_step_min", "eps_step_max"):
            v = scalar(getattr(self, name))
            if v <= 0:
                raise ValueError(f"{name} must be positive")
            setattr(self, name, v)
        if self.tail_lo > self.tail_hi:
            raise ValueError("tail_lo must not exceed tail_hi")
        for name in ("L_max", "L_min"):
            L = getattr(self, name)
            if L < 2 or L & (L - 1):
                raise ValueError(f"{name} must be a power of two")
        if self.eps_step_min > self.eps_step_max:
            raise ValueError("eps_step_min must not exceed eps_step_max")
        if self.max_newton_iters < 1:
            raise ValueError("max_newton_iters must be positive")


@dataclass
class ContinuationRecord:
    eps: mpmath.mpf
    ecc: mpmath.mpf
    residual: mpmath.mpf
    L: int
    seminorms: tuple
    min_angle: mpmath.mpf
    width: mpmath.mpf
    wall_time: float

    def H(self, r: int) -> mpmath.mpf:
        return self.seminorms[SEMINORM_ORDERS.index(r)]


# --- evaluation ------------------------------------------------------------------

@dataclass
class TorusEvaluation:
    """Invariance error on the grid plus (optionally) the map jets there."""

    E1: np.ndarray
    E2: np.ndarray
    norm: mpmath.mpf
    grid: flowmap.GridMap

    def series(self):
        return FourierSeries.from_grid(self.E1), FourierSeries.from_grid(self.E2)


def _theta_grid(L: int) -> np.ndarray:
    return np.array([mp.mpf(j) / L for j in range(L)], dtype=object)


def evaluate_torus(sol: TorusSolution, jets: bool = True, config: flowmap.TaylorConfig | None = None,
                   workers: int | None = None) -> TorusEvaluation:
    two_pi = 2 * mp.pi
    theta = _theta_grid(sol.L)
    ug = sol.u.to_grid()
    kg = sol.K2.to_grid()
    gm = flowmap.poincare_map_grid(two_pi * (theta + ug), two_pi * kg, sol.params, config,
                                   jets=jets, workers=workers)
    us = sol.u.shift(sol.omega).to_grid()
    ks = sol.K2.shift(sol.omega).to_grid()
    E1 = gm.x / two_pi - theta - sol.omega - us
    E2 = gm.y / two_pi - ks
    norm = max(max(abs(v) for v in E1), max(abs(v) for v in E2))
    return TorusEvaluation(E1=E1, E2=E2, norm=norm, grid=gm)


def invariance_error(sol: TorusSolution, config=None, workers=None):
    """``(E1, E2, norm)`` of ``P_e(K(theta)) - K(theta + omega)``."""
    ev = evaluate_torus(sol, jets=False, config=config, workers=workers)
    E1, E2 = ev.series()
    return E1, E2, ev.norm


# --- Newton step ---------------------------------------------------------------

def _grid_mean(values) -> mpmath.mpf:
    return kahan_sum(values) / len(values)


@dataclass
class FrameData:
    """Pointwise frame quantities on the grid (all numpy object arrays)."""

    DK1: np.ndarray
    DK2: np.ndarray
    N: np.ndarray
    DK1s: np.ndarray
    DK2s: np.ndarray
    Ns: np.ndarray
    S: np.ndarray
    DP: tuple
    dPde: tuple


def frame_data(sol: TorusSolution, ev: TorusEvaluation) -> FrameData:
    if ev.grid.dx is None:
        raise ValueError("frame needs an evaluation with jets")
    du = sol.u.derivative()
    dk2 = sol.K2.derivative()
    DK1 = du.to_grid() + 1
    DK2 = dk2.to_grid()
    DK1s = du.shift(sol.omega).to_grid() + 1
    DK2s = dk2.shift(sol.omega).to_grid()
    nrm = DK1 * DK1 + DK2 * DK2
    if min(nrm) < mp.mpf(10) ** (-(mp.dps // 2)):
        raise PrecisionError("adapted frame is singular (DK vanishes)")
    N = 1 / nrm
    Ns = 1 / (DK1s * DK1s + DK2s * DK2s)
    g = ev.grid
    a11, a12, a21, a22 = g.dx[:, 0], g.dx[:, 1], g.dy[:, 0], g.dy[:, 1]
    two_pi = 2 * mp.pi
    dPde = (g.dx[:, 2] / two_pi, g.dy[:, 2] / two_pi)
    v1 = -DK2 * N
    v2 = DK1 * N
    S = Ns * (DK1s * (a11 * v1 + a12 * v2) + DK2s * (a21 * v1 + a22 * v2))
    return FrameData(DK1, DK2, N, DK1s, DK2s, Ns, S, (a11, a12, a21, a22), dPde)


def _newton_update(sol: TorusSolution, ev: TorusEvaluation) -> TorusSolution:
    fd = frame_data(sol, ev)
    E1, E2 = ev.E1, ev.E2
    # M(theta + omega)^-1 applied to the error and to dP/de
    Et1 = fd.Ns * (fd.DK1s * E1 + fd.DK2s * E2)
    Et2 = -fd.DK2s * E1 + fd.DK1s * E2
    At1 = fd.Ns * (fd.DK1s * fd.dPde[0] + fd.DK2s * fd.dPde[1])
    At2 = -fd.DK2s * fd.dPde[0] + fd.DK1s * fd.dPde[1]
    lam = conformal_factor(sol.ecc, sol.params.mu)
    # lambda W - W o T = R  <=>  W - (1/lambda) W o T = -(-R/lambda)
    inv = 1 / lam
    W2a = solve_cohomology_contractive(FourierSeries.from_grid(Et2 * inv), inv, sol.omega)
    W2b = solve_cohomology_contractive(FourierSeries.from_grid(At2 * inv), inv, sol.omega)
    W2a_g, W2b_g = W2a.to_grid(), W2b.to_grid()
    den = _grid_mean(fd.S * W2b_g + At1)
    scale = max(abs(v) for v in At1) + max(abs(v) for v in fd.S * W2b_g)
    if abs(den) <= eps_digits(5) * max(scale, 1):
        raise ConvergenceError("vanishing twist denominator in the drift correction")
    de = -_grid_mean(Et1 + fd.S * W2a_g) / den
    W2 = W2a_g + de * W2b_g
    R1 = FourierSeries.from_grid(-Et1 - fd.S * W2 - At1 * de)
    R1.coeffs[0] = mp.mpc(0)
    W1 = solve_cohomology_neutral(R1, sol.omega).to_grid()
    dK1 = fd.DK1 * W1 - fd.DK2 * fd.N * W2
    dK2 = fd.DK2 * W1 + fd.DK1 * fd.N * W2
    u = sol.u + FourierSeries.from_grid(dK1)
    K2 = sol.K2 + FourierSeries.from_grid(dK2)
    ecc = sol.ecc + de
    if not 0 <= ecc < 1:
        raise ConvergenceError(f"drift left the admissible range (e = {mp.nstr(ecc, 8)})")
    u, K2 = normalize_phase(u, K2)
    params = sol.params.replace(ecc=ecc)
    return TorusSolution(u=u, K2=K2, ecc=ecc, omega=sol.omega, residual=mp.inf,
                         lam=conformal_factor(ecc, params.mu), params=params)


def normalize_phase(u: FourierSeries, K2: FourierSeries):
    """Fix the translation freedom so that ``u`` has zero mean."""
    tau = u.mean()
    if tau == 0:
        return u, K2
    u_new = u.shift(-tau) - tau
    u_new.coeffs[0] = mp.mpc(0)
    return u_new, K2.shift(-tau)


def newton_step(sol: TorusSolution, config=None, workers=None) -> TorusSolution:
    """One Newton correction of ``(K, e)``; the returned residual is re-evaluated."""
    ev = sol.evaluation
    if ev is None or ev.grid.dx is None:
        ev = evaluate_torus(sol, jets=True, config=config, workers=workers)
    new = _newton_update(sol, ev)
    new.evaluation = evaluate_torus(new, jets=True, config=config, workers=workers)
    new.residual = new.evaluation.norm
    return new


# --- solving and continuation -----------------------------------------------------

def solve_torus(guess: TorusSolution, cfg: ContinuationConfig, config=None, workers=None,
                history: list | None = None) -> TorusSolution:
    """Newton iteration plus mesh control; ``history`` collects residuals."""
    sol = guess
    L = sol.L
    refined = False
    while True:
        # a freshly refined mesh needs one step to populate its new modes
        sol = _iterate(sol, cfg, config, workers, history, min_steps=int(refined))
        tail = max(tail_fraction_norm(sol.u), tail_fraction_norm(sol.K2))
        if tail > cfg.tail_hi or sol.residual >= cfg.newton_tol:
            # a residual floor above tolerance is a truncation floor: refine as well
            if 2 * L > cfg.L_max:
                raise ConvergenceError(f"residual {mp.nstr(sol.residual, 3)}, tail {mp.nstr(tail, 3)}: "
                                       f"needs a mesh beyond L_max = {cfg.L_max}")
            L *= 2
            log.info("tail %s, residual %s: remeshing to L = %d", mp.nstr(tail, 3),
                     mp.nstr(sol.residual, 3), L)
            sol = sol.with_mesh(L)
            refined = True
            continue
        if tail < cfg.tail_lo and L // 2 >= cfg.L_min and not refined:
            coarse = sol.with_mesh(L // 2)
            try:
                coarse = _iterate(coarse, cfg, config, workers, history)
            except ConvergenceError:
                return sol
            if coarse.residual < cfg.newton_tol:
                log.info("tail %s below tolerance: remeshed to L = %d", mp.nstr(tail, 3), L // 2)
                return coarse
        return sol


def _iterate(sol, cfg, config, workers, history, min_steps=0):
    ev = sol.evaluation
    if ev is None or ev.grid.dx is None:
        ev = evaluate_torus(sol, jets=True, config=config, workers=workers)
    sol = replace(sol, residual=ev.norm, evaluation=ev)
    best = ev.norm
    for it in range(cfg.max_newton_iters + 1):
        log.debug("newton iter %d: residual %s", it, mp.nstr(sol.residual, 4))
        if history is not None:
            history.append(sol.residual)
        if sol.residual < cfg.newton_tol and it >= min_steps:
            return sol
        if it == cfg.max_newton_iters:
            break
        try:
            new = _newton_update(sol, sol.evaluation)
            ev = evaluate_torus(new, jets=True, config=config, workers=workers)
        except (PrecisionError, flowmap.IntegrationError, ValueError) as exc:
            raise ConvergenceError(f"Newton step failed: {exc}") from exc
        new.residual = ev.norm
        new.evaluation = ev
        if not mp.isfinite(new.residual):
            raise ConvergenceError("Newton iteration produced a non-finite residual")
        if it >= 2 and new.residual > best / 2:
            if new.residual > 1e6 * best:
                raise ConvergenceError(f"Newton iteration diverging (residual {mp.nstr(new.residual, 3)})")
            log.debug("newton stalled at %s", mp.nstr(best, 4))
            return sol if sol.residual <= new.residual else new
        best = min(best, new.residual)
        sol = new
    return sol


def integrable_torus(omega, params: ModelParams, L: int = 64) -> TorusSolution:
    """Averaged eps = 0 attractor ``(theta, omega / (2 pi))`` with drift from ``Nbar/Lbar = omega``."""
    omega = mp.mpf(omega)
    ecc = drift_for_frequency(omega)
    params = params.replace(ecc=ecc)
    return TorusSolution(u=FourierSeries.zeros(L), K2=FourierSeries.constant(omega / (2 * mp.pi), L),
                         ecc=ecc, omega=omega, residual=mp.inf,
                         lam=conformal_factor(ecc, params.mu), params=params)


def _extrapolate(history, eps_new, L):
    """Lagrange extrapolation in eps through up to four accepted tori."""
    pts = history[-4:]
    eps = [s.eps for s in pts]
    weights = []
    for i, ei in enumerate(eps):
        w = mp.one
        for j, ej in enumerate(eps):
            if j != i:
                w *= (eps_new - ej) / (ei - ej)
        weights.append(w)
    us = [s.u.resize(L).coeffs for s in pts]
    ks = [s.K2.resize(L).coeffs for s in pts]
    u = FourierSeries._raw(sum(w * c for w, c in zip(weights, us)))
    K2 = FourierSeries._raw(sum(w * c for w, c in zip(weights, ks)))
    ecc = sum(w * s.ecc for w, s in zip(weights, pts))
    last = pts[-1]
    params = last.params.replace(eps=eps_new, ecc=ecc)
    return TorusSolution(u=u, K2=K2, ecc=ecc, omega=last.omega, residual=mp.inf,
                         lam=conformal_factor(ecc, params.mu), params=params)


def make_record(sol: TorusSolution, wall: float) -> ContinuationRecord:
    from .bundles import adapted_frame, min_angle, reduce_bundles

    H = tuple(sobolev_seminorm(sol.u, r) for r in SEMINORM_ORDERS)
    try:
        angle = min_angle(reduce_bundles(adapted_frame(sol), sol.lam, sol.omega))
    except (ValueError, PrecisionError) as exc:
        log.warning("bundle angle unavailable: %s", exc)
        angle = mp.nan
    try:
        width = analyticity_width(sol.u)
    except ValueError:
        width = mp.nan
    return ContinuationRecord(eps=sol.eps, ecc=sol.ecc, residual=sol.residual, L=sol.L, seminorms=H,
                              min_angle=angle, width=width, wall_time=wall)


def continue_family(start: TorusSolution, eps_target, cfg: ContinuationConfig, config=None,
                    workers=None, on_accept=None, records: list | None = None,
                    history: list | None = None) -> list:
    """March ``eps`` from the start torus to ``eps_target``.

    ``on_accept(sol, record)`` is called for every accepted torus.  ``history``
    may carry previously accepted tori (for restarts); the start torus is
    solved first if its residual is not below tolerance.
    """
    eps_target = mp.mpf(eps_target)
    records = [] if records is None else records
    t0 = time.perf_counter()
    sol = start
    if not sol.residual < cfg.newton_tol:
        sol = solve_torus(sol, cfg, config, workers)
    history = list(history or []) + [sol]
    if not records:
        rec = make_record(sol, time.perf_counter() - t0)
        records.append(rec)
        if on_accept:
            on_accept(sol, rec)
    step = _next_step(history, cfg)
    while sol.eps < eps_target:
        eps_new = min(sol.eps + step, eps_target)
        t1 = time.perf_counter()
        guess = _extrapolate(history, eps_new, sol.L)
        try:
            new = solve_torus(guess, cfg, config, workers)
        except ConvergenceError as exc:
            step /= 2
            log.info("eps = %s failed (%s); step -> %s", mp.nstr(eps_new, 10), exc, mp.nstr(step, 3))
            if step < cfg.eps_step_min:
                raise ContinuationStall(f"continuation stalled after eps = {mp.nstr(sol.eps, 15)}",
                                        sol.eps, records) from exc
            continue
        sol = new
        history = (history + [sol])[-4:]
        rec = make_record(sol, time.perf_counter() - t1)
        records.append(rec)
        log.info("accepted eps = %s e = %s residual = %s L = %d", mp.nstr(sol.eps, 10),
                 mp.nstr(sol.ecc, 15), mp.nstr(sol.residual, 3), sol.L)
        if on_accept:
            on_accept(sol, rec)
        step = _next_step(history, cfg)
    return records


def _next_step(history, cfg: ContinuationConfig):
    """3/2 of the last accepted step, so a restart from saved tori replays the same steps."""
    if len(history) < 2:
        return min(cfg.eps_step_init, cfg.eps_step_max)
    return min((history[-1].eps - history[-2].eps) * mp.mpf(3) / 2, cfg.eps_step_max)


# --- persistence -------------------------------------------------------------------

def write_torus(path, sol: TorusSolution) -> None:
    p = sol.params
    head = " ".join([format_scalar(sol.omega), format_scalar(p.eps), format_scalar(sol.ecc),
                     format_scalar(p.mu), format_scalar(sol.lam), str(sol.L), str(mp.dps),
                     p.variant.value])
    lines = [head] + series_lines(sol.u) + series_lines(sol.K2)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text("\n".join(lines) + "\n")
    tmp.replace(path)


def read_torus(path) -> TorusSolution:
    path = Path(path)
    lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
    if not lines:
        raise ValueError(f"{path}: empty torus file")
    head = lines[0].split()
    if len(head) != 8:
        raise ValueError(f"{path}: malformed torus header")
    omega, eps, ecc, mu, lam = (parse_scalar(v) for v in head[:5])
    L = int(head[5])
    variant = Variant(head[7])
    block = L + 1
    if len(lines) != 1 + 2 * block:
        raise ValueError(f"{path}: expected two blocks of {L} coefficients")
    u, _ = parse_series_lines(lines[1:1 + block], str(path))
    K2, _ = parse_series_lines(lines[1 + block:], str(path))
    if u.L != L or K2.L != L:
        raise ValueError(f"{path}: block length mismatch")
    params = ModelParams(eps=eps, ecc=ecc, mu=mu, variant=variant)
    return TorusSolution(u=u, K2=K2, ecc=ecc, omega=omega, residual=mp.inf, lam=lam, params=params)


LOG_FIELDS = ["eps", "ecc", "residual", "L"] + [f"H{r}" for r in SEMINORM_ORDERS] + \
    ["min_angle", "width", "wall_time"]


def format_record(rec: ContinuationRecord) -> str:
    vals = [format_scalar(rec.eps), format_scalar(rec.ecc), format_scalar(rec.residual), str(rec.L)]
    vals += [format_scalar(h) for h in rec.seminorms]
    vals += [_fmt_maybe_nan(rec.min_angle), _fmt_maybe_nan(rec.width), f"{rec.wall_time:.3f}"]
    return ",".join(vals)


def _fmt_maybe_nan(x) -> str:
    return "nan" if mp.isnan(x) else format_scalar(x)


def parse_record(line: str) -> ContinuationRecord:
    parts = line.strip().split(",")
    if len(parts) != len(LOG_FIELDS):
        raise ValueError(f"malformed log record ({len(parts)} fields)")
    num = lambda s: mp.nan if s == "nan" else parse_scalar(s)
    H = tuple(num(v) for v in parts[4:4 + len(SEMINORM_ORDERS)])
    return ContinuationRecord(eps=num(parts[0]), ecc=num(parts[1]), residual=num(parts[2]),
                              L=int(parts[3]), seminorms=H, min_angle=num(parts[-3]),
                              width=num(parts[-2]), wall_time=float(parts[-1]))


def write_log(path, records) -> None:
    lines = [",".join(LOG_FIELDS)] + [format_record(r) for r in records]
    Path(path).write_text("\n".join(lines) + "\n")


def append_log(path, record: ContinuationRecord) -> None:
    path = Path(path)
    new = not path.exists()
    with path.open("a") as fh:
        if new:
            fh.write(",".join(LOG_FIELDS) + "\n")
        fh.write(format_record(record) + "\n")


def read_log(path) -> list:
    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
    if not lines or lines[0].split(",") != LOG_FIELDS:
        raise ValueError(f"{path}: not a continuation log")
    return [parse_record(ln) for ln in lines[1:]]
