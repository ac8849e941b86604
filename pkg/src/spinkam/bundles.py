"""Adapted frames, the reducing function B and the invariant bundles of a torus.

With ``M = [DK | J^-1 DK N]`` the linearized map along the torus is
``[[1, S], [0, lambda]]``.  Solving ``B - lambda B(theta + omega) = -S`` turns
it diagonal: the tangent bundle is ``E^c = DK`` (multiplier 1) and the stable
bundle ``E^s = M (B, 1)`` (multiplier lambda).
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import mpmath
import numpy as np
from mpmath import mp

from .fourier import FourierSeries, solve_cohomology_contractive
from .kam import TorusSolution, evaluate_torus, frame_data
from .numerics import PrecisionError, format_scalar


@dataclass
class AdaptedFrame:
    N: FourierSeries
    M: tuple            # ((DK1, DK2), (-DK2 N, DK1 N)) column grids
    S: FourierSeries
    DP: tuple           # (a11, a12, a21, a22) grids of DP(K(theta))
    omega: mpmath.mpf
    sol: TorusSolution

    @property
    def L(self) -> int:
        return self.N.L


@dataclass
class BundlePair:
    Ec: tuple           # (x, y) grids
    Es: tuple
    B: FourierSeries
    alpha: FourierSeries
    alpha_grid: np.ndarray
    frame: AdaptedFrame


def adapted_frame(sol: TorusSolution, config=None, workers=None) -> AdaptedFrame:
    ev = sol.evaluation
    if ev is None or ev.grid.dx is None:
        ev = evaluate_torus(sol, jets=True, config=config, workers=workers)
        sol.evaluation = ev
    fd = frame_data(sol, ev)
    if min(fd.N) <= 0:
        raise PrecisionError("frame normalization is not positive")
    M = ((fd.DK1, fd.DK2), (-fd.DK2 * fd.N, fd.DK1 * fd.N))
    return AdaptedFrame(N=FourierSeries.from_grid(fd.N), M=M, S=FourierSeries.from_grid(fd.S),
                        DP=fd.DP, omega=sol.omega, sol=sol)


def reduce_bundles(frame: AdaptedFrame, lam, omega=None) -> BundlePair:
    lam = mp.mpf(lam)
    if not abs(lam) < 1:
        raise ValueError("bundle reduction needs |lambda| < 1")
    omega = frame.omega if omega is None else mp.mpf(omega)
    B = solve_cohomology_contractive(frame.S, lam, omega)
    Bg = B.to_grid()
    (DK1, DK2), _ = frame.M
    Ng = frame.N.to_grid()
    Es = (DK1 * Bg - DK2 * Ng, DK2 * Bg + DK1 * Ng)
    alpha = np.array([mp.atan2(n, b) for n, b in zip(Ng, Bg)], dtype=object)
    return BundlePair(Ec=(DK1, DK2), Es=Es, B=B, alpha=FourierSeries.from_grid(alpha),
                      alpha_grid=alpha, frame=frame)


def min_angle(pair: BundlePair) -> mpmath.mpf:
    """``min |alpha| / pi`` over the grid."""
    return min(abs(a) for a in pair.alpha_grid) / mp.pi


def _unwrap(angles) -> np.ndarray:
    out = [angles[0]]
    for a in angles[1:]:
        prev = out[-1]
        d = a - prev
        d -= 2 * mp.pi * mp.nint(d / (2 * mp.pi))
        out.append(prev + d)
    return np.array(out, dtype=object)


def bundle_angles_vs_axis(pair: BundlePair):
    """Angles of ``E^c`` and ``E^s`` with the positive x semi-axis, unwrapped.

    ``E^s`` is a line field; it is oriented to make an acute angle with
    ``E^c`` before taking the arc tangent.
    """
    cx, cy = pair.Ec
    sx, sy = pair.Es
    sgn = np.array([1 if a * c + b * d >= 0 else -1 for a, b, c, d in zip(sx, sy, cx, cy)], dtype=object)
    sx, sy = sx * sgn, sy * sgn
    theta_c = _unwrap([mp.atan2(y, x) for x, y in zip(cx, cy)])
    theta_s = _unwrap([mp.atan2(y, x) for x, y in zip(sx, sy)])
    return FourierSeries.from_grid(theta_c), FourierSeries.from_grid(theta_s)


def _shifted_grid(grid, omega):
    return FourierSeries.from_grid(grid).shift(omega).to_grid()


def reducibility_defect(frame: AdaptedFrame, lam) -> mpmath.mpf:
    """``max |DP(K) M - M(theta + omega) [[1, S], [0, lambda]]|`` on the grid."""
    a11, a12, a21, a22 = frame.DP
    (m11, m21), (m12, m22) = frame.M
    w = frame.omega
    s11, s21, s12, s22 = (_shifted_grid(g, w) for g in (m11, m21, m12, m22))
    S = frame.S.to_grid()
    lam = mp.mpf(lam)
    d = [a11 * m11 + a12 * m21 - s11, a21 * m11 + a22 * m21 - s21,
         a11 * m12 + a12 * m22 - (s11 * S + s12 * lam), a21 * m12 + a22 * m22 - (s21 * S + s22 * lam)]
    return max(max(abs(v) for v in col) for col in d)


def bundle_invariance_defect(pair: BundlePair, lam) -> mpmath.mpf:
    """Pointwise relative defect of ``DP E^c = E^c(theta+omega)`` and ``DP E^s = lambda E^s(theta+omega)``.

    Bundles are line fields, so each defect is measured against the length of
    the shifted representative; ``E^s`` otherwise carries the arbitrary scale of B.
    """
    a11, a12, a21, a22 = pair.frame.DP
    w = pair.frame.omega
    lam = mp.mpf(lam)
    out = mp.zero
    for (vx, vy), mult in ((pair.Ec, 1), (pair.Es, lam)):
        tx, ty = _shifted_grid(vx, w), _shifted_grid(vy, w)
        rx = a11 * vx + a12 * vy - mult * tx
        ry = a21 * vx + a22 * vy - mult * ty
        out = max(out, max(mp.hypot(a, b) / mp.hypot(c, d) for a, b, c, d in zip(rx, ry, tx, ty)))
    return out


def export_bundles(path, pair: BundlePair, normalized: bool = False) -> None:
    """Rows ``theta Ec_x Ec_y Es_x Es_y alpha``; ``normalized`` scales both to unit length."""
    L = len(pair.alpha_grid)
    cx, cy = pair.Ec
    sx, sy = pair.Es
    rows = ["theta Ec_x Ec_y Es_x Es_y alpha"]
    for j in range(L):
        ex, ey, fx, fy = cx[j], cy[j], sx[j], sy[j]
        if normalized:
            nc, ns = mp.hypot(ex, ey), mp.hypot(fx, fy)
            ex, ey, fx, fy = ex / nc, ey / nc, fx / ns, fy / ns
        vals = [mp.mpf(j) / L, ex, ey, fx, fy, pair.alpha_grid[j]]
        rows.append(" ".join(format_scalar(v) for v in vals))
    Path(path).write_text("\n".join(rows) + "\n")
