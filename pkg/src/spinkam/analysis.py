"""Rotation numbers, basins of rotation numbers, scale-invariant observables and the breakdown report."""
from __future__ import annotations

import concurrent.futures
import enum
import math
import re
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import mpmath
import numpy as np
from mpmath import mp

from . import flowmap
from .flowmap import TaylorConfig, default_workers
from .model import ModelParams, Variant, conformal_factor
from .numerics import format_scalar, kahan_sum, linear_fit, scalar

# above this many digits the orbit is iterated with the multiprecision integrator
DOUBLE_DIGITS = 16


class Weight(enum.Enum):
    BUMP_EXP = "bump_exp"
    UNIT = "unit"  # plain Birkhoff mean, a test hook


def weight(z) -> mpmath.mpf:
    """Bump ``exp(-1 / (z^2 (1 - z)^2))`` on (0, 1), extended by zero."""
    z = scalar(z)
    if z <= 0 or z >= 1:
        return mp.zero
    return mp.exp(-1 / (z * z * (1 - z) ** 2))


def _weight_double(z: np.ndarray) -> np.ndarray:
    out = np.zeros_like(z)
    inside = (z > 0) & (z < 1)
    zi = z[inside]
    out[inside] = np.exp(-1.0 / (zi * zi * (1.0 - zi) ** 2))
    return out


@dataclass(frozen=True)
class RotationConfig:
    n1: int = 4500
    n2: int = 4600
    delta: int = 10
    n0_override: int | None = None
    weight: Weight = Weight.BUMP_EXP

    def __post_init__(self):
        if not 1 <= self.n1 < self.n2:
            raise ValueError("need 1 <= n1 < n2")
        if self.delta < 1:
            raise ValueError("delta must be at least 1")
        if self.n0_override is not None and self.n0_override < 0:
            raise ValueError("n0_override must be non-negative")
        object.__setattr__(self, "weight", Weight(self.weight))


def transient_length(params: ModelParams, cfg: RotationConfig) -> int:
    """``n0 = ceil(-14 / log10 lambda)`` unless overridden."""
    if cfg.n0_override is not None:
        return cfg.n0_override
    if params.mu <= 0:
        raise ValueError("the transient is infinite for mu = 0; set n0_override")
    lam = conformal_factor(params.ecc, params.mu)
    return int(mp.ceil(-14 / mp.log10(lam)))


def orbit_samples(x0, y0, params: ModelParams, n_skip: int, n_store: int,
                  config: TaylorConfig | None = None) -> list:
    """``y(2 pi j)`` for ``j = n_skip+1 .. n_skip+n_store`` as Scalars."""
    if mp.dps <= DOUBLE_DIGITS:
        g = flowmap.orbit_gammas_double(x0, y0, params, n_skip, n_store)
        if params.variant is Variant.NON_AVERAGED:
            g = g / (1.0 - float(params.ecc))
        return [mp.mpf(float(v)) for v in g]
    config = config or TaylorConfig.for_precision()
    x, y = scalar(x0), scalar(y0)
    out = []
    for j in range(n_skip + n_store):
        gm = flowmap.poincare_map_grid([x], [y], params, config, jets=False, workers=1)
        x, y = gm.x[0], gm.y[0]
        if j >= n_skip:
            out.append(y)
    return out


def weighted_average(samples, n: int, kind: Weight = Weight.BUMP_EXP) -> mpmath.mpf:
    """``sum_j phi(j/n) y_j / sum_j phi(j/n)`` over ``j = 1 .. n-1`` (``samples[0]`` is ``y_1``)."""
    if kind is Weight.UNIT:
        w = [mp.one] * (n - 1)
    else:
        w = [weight(mp.mpf(j) / n) for j in range(1, n)]
    num = kahan_sum(wj * samples[j - 1] for j, wj in zip(range(1, n), w))
    return num / kahan_sum(w)


def _weighted_average_double(samples: np.ndarray, n: int, kind: Weight) -> float:
    z = np.arange(1, n) / n
    w = np.ones_like(z) if kind is Weight.UNIT else _weight_double(z)
    return math.fsum(w * samples[: n - 1]) / math.fsum(w)


def rotation_number(x0, y0, params: ModelParams, cfg: RotationConfig = RotationConfig(),
                    config: TaylorConfig | None = None) -> tuple:
    """Weighted Birkhoff average of ``y`` at the period times; returns ``(rho, converged)``.

    Averaging ``gamma = (1-e) y`` and dividing by ``1-e`` is the same as
    averaging ``y``, which is what is done here.
    """
    n0 = transient_length(params, cfg)
    samples = orbit_samples(x0, y0, params, n0, cfg.n2, config)
    tol = mp.mpf(10) ** (-(mp.dps // 2))
    double = mp.dps <= DOUBLE_DIGITS
    arr = np.array([float(s) for s in samples]) if double else None
    prev = None
    n = cfg.n1
    while n <= cfg.n2:
        if double:
            rho = mp.mpf(_weighted_average_double(arr, n, cfg.weight))
        else:
            rho = weighted_average(samples, n, cfg.weight)
        if prev is not None and abs(rho - prev) <= tol * max(1, abs(rho)):
            return rho, True
        prev = rho
        n += cfg.delta
    return prev, False


# --- basins -----------------------------------------------------------------------

@dataclass
class BasinNode:
    x: mpmath.mpf
    y: mpmath.mpf
    rho: mpmath.mpf
    converged: bool


def basin_nodes(window, nx: int, ny: int) -> list:
    """Row-major ``(x, y)`` nodes; x spans ``[x_lo, x_hi)`` (periodic), y spans ``[y_lo, y_hi]``."""
    x_lo, x_hi, y_lo, y_hi = (scalar(v) for v in window)
    if nx < 2 or ny < 2:
        raise ValueError("basin grids need nx, ny >= 2")
    if not (x_lo < x_hi and y_lo < y_hi):
        raise ValueError("empty basin window")
    xs = [x_lo + (x_hi - x_lo) * i / nx for i in range(nx)]
    ys = [y_lo + (y_hi - y_lo) * j / (ny - 1) for j in range(ny)]
    return [(x, y) for y in ys for x in xs]


def _basin_chunk(args):
    dps, nodes, params, cfg, config = args
    with mp.workdps(dps):
        out = []
        for x, y in nodes:
            rho, ok = rotation_number(x, y, params, cfg, config)
            out.append(BasinNode(x, y, rho, ok))
        return out


def basin_grid(window, nx: int, ny: int, params: ModelParams, cfg: RotationConfig = RotationConfig(),
               config: TaylorConfig | None = None, workers: int | None = None,
               node_range: tuple | None = None) -> list:
    """Rotation number at every node; ``node_range = (start, stop)`` selects a slice for resuming."""
    nodes = basin_nodes(window, nx, ny)
    if node_range is not None:
        nodes = nodes[node_range[0]:node_range[1]]
    workers = default_workers() if workers is None else workers
    if workers <= 1 or len(nodes) < 2:
        return _basin_chunk((mp.dps, nodes, params, cfg, config))
    bounds = np.linspace(0, len(nodes), min(workers * 4, len(nodes)) + 1).astype(int)
    tasks = [(mp.dps, nodes[a:b], params, cfg, config) for a, b in zip(bounds[:-1], bounds[1:])]
    with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
        return [node for part in pool.map(_basin_chunk, tasks) for node in part]


BASIN_COLUMNS = "x,y,rho,converged"


def basin_header(params: ModelParams, cfg: RotationConfig, window, nx: int, ny: int) -> list:
    items = [("eps", format_scalar(params.eps)), ("ecc", format_scalar(params.ecc)),
             ("mu", format_scalar(params.mu)), ("variant", params.variant.value),
             ("window", " ".join(format_scalar(v) for v in window)), ("nx", nx), ("ny", ny),
             ("n1", cfg.n1), ("n2", cfg.n2), ("delta", cfg.delta),
             ("n0", "auto" if cfg.n0_override is None else cfg.n0_override),
             ("weight", cfg.weight.value), ("precision", mp.dps)]
    return [f"# {k} = {v}" for k, v in items] + [BASIN_COLUMNS]


def basin_rows(nodes) -> list:
    return [f"{format_scalar(n.x)},{format_scalar(n.y)},{format_scalar(n.rho)},{int(n.converged)}"
            for n in nodes]


def read_basin(path) -> list:
    out = []
    for ln in Path(path).read_text().splitlines():
        if not ln.strip() or ln.startswith("#") or ln == BASIN_COLUMNS:
            continue
        x, y, rho, ok = ln.split(",")
        out.append(BasinNode(mp.mpf(x), mp.mpf(y), mp.mpf(rho), ok.strip() == "1"))
    return out


# --- scale-invariant observables ---------------------------------------------------

_SUPERSCRIPTS = str.maketrans("⁰¹²³⁴⁵⁶⁷⁸⁹", "0123456789")
_FACTOR = re.compile(r"H_?\{?(\d+)\}?(?:\^\{?(\d+)\}?)?")


def _parse_product(text: str) -> dict:
    text = re.sub("[⁰¹²³⁴⁵⁶⁷⁸⁹]+", lambda m: "^" + m.group(0).translate(_SUPERSCRIPTS), text)
    text = text.replace(" ", "").replace("$", "").strip("()")
    out: dict = {}
    pos = 0
    while pos < len(text):
        m = _FACTOR.match(text, pos)
        if m is None:
            raise ValueError(f"cannot parse seminorm product {text!r}")
        r, p = int(m.group(1)), int(m.group(2) or 1)
        out[r] = out.get(r, 0) + p
        pos = m.end()
    return out


@dataclass(frozen=True)
class ObservableSpec:
    """``prod_i H(r_i)^gamma_i``; scale invariance needs ``sum gamma = 0`` and ``sum gamma r = 0``."""
    gammas: tuple
    orders: tuple

    def __post_init__(self):
        if len(self.gammas) != len(self.orders) or not self.gammas:
            raise ValueError("exponents and orders must be non-empty and of equal length")
        g = tuple(Fraction(str(v)) if not isinstance(v, (int, Fraction)) else Fraction(v) for v in self.gammas)
        r = tuple(Fraction(str(v)) if not isinstance(v, (int, Fraction)) else Fraction(v) for v in self.orders)
        if sum(g) != 0:
            raise ValueError(f"exponents sum to {sum(g)}, not 0")
        if sum(a * b for a, b in zip(g, r)) != 0:
            raise ValueError("exponent-weighted orders do not sum to 0")
        object.__setattr__(self, "gammas", g)
        object.__setattr__(self, "orders", r)

    @classmethod
    def parse(cls, text: str) -> "ObservableSpec":
        """Read ratios such as ``H1H4/(H2H3)`` or ``H1³H3²/(H1H2⁴)``; equal orders are merged."""
        num, _, den = text.partition("/")
        powers = _parse_product(num)
        for r, p in _parse_product(den).items():
            powers[r] = powers.get(r, 0) - p
        powers = {r: p for r, p in sorted(powers.items()) if p}
        if not powers:
            raise ValueError(f"{text!r} is identically 1")
        return cls(tuple(powers.values()), tuple(powers.keys()))

    def label(self) -> str:
        parts = [f"H{r}^{g}" for g, r in zip(self.gammas, self.orders)]
        return " ".join(parts)


def scale_invariant_observable(H, spec: ObservableSpec) -> mpmath.mpf:
    """``prod H(r_i)^gamma_i`` where ``H`` maps order to seminorm (dict or callable)."""
    get = H if callable(H) else H.__getitem__
    out = mp.one
    for g, r in zip(spec.gammas, spec.orders):
        key = int(r) if r.denominator == 1 else r
        out *= mp.mpf(get(key)) ** (mp.mpf(g.numerator) / g.denominator)
    return out


# --- breakdown report -------------------------------------------------------------

H_GROWTH_SIGNATURE = 1000
DEFAULT_ANGLE_FLOOR = mp.mpf("0.99")


@dataclass
class BreakdownReport:
    rows: list                       # per record: eps, growth factors H_r / H_r(first), width, min angle
    log_h_slopes: dict               # order -> slope of log10 H_r vs eps over the last four records
    width_slope: mpmath.mpf
    angle_slope: mpmath.mpf
    h8_growth: mpmath.mpf
    min_angle_floor_seen: mpmath.mpf
    signature: str                   # "loss-of-regularity", "bundle-collapse" or "none"
    notes: list = field(default_factory=list)

    def lines(self) -> list:
        out = [f"signature = {self.signature}",
               f"H8_growth = {format_scalar(self.h8_growth)}",
               f"min_angle_over_log = {format_scalar(self.min_angle_floor_seen)}",
               f"width_slope = {format_scalar(self.width_slope)}",
               f"angle_slope = {format_scalar(self.angle_slope)}"]
        out += [f"log10_H{r}_slope = {format_scalar(s)}" for r, s in self.log_h_slopes.items()]
        out += [f"note = {n}" for n in self.notes]
        return out


def _finite(x) -> bool:
    return x is not None and mp.isfinite(x)


def breakdown_report(records, angle_floor=DEFAULT_ANGLE_FLOOR) -> BreakdownReport:
    """Growth of the seminorms, width and angle trends, and the breakdown signature."""
    records = sorted(records, key=lambda r: r.eps)
    if len(records) < 4:
        raise ValueError("breakdown report needs at least 4 records")
    angle_floor = scalar(angle_floor)
    orders = range(1, len(records[0].seminorms) + 1)
    # the eps = 0 torus has u = 0, so growth is measured from the first perturbed record
    first = next((rec for rec in records if rec.eps > 0), records[0])
    rows = []
    for rec in records:
        growth = tuple(h / h0 if h0 != 0 else mp.inf for h, h0 in zip(rec.seminorms, first.seminorms))
        rows.append((rec.eps, growth, rec.width, rec.min_angle))
    tail = records[-4:]
    notes = []
    slopes = {}
    for r in orders:
        pts = [(rec.eps, mp.log10(rec.seminorms[r - 1])) for rec in tail if rec.seminorms[r - 1] > 0]
        slopes[r] = linear_fit(pts)[0] if len(pts) >= 2 else mp.nan
    trend = {}
    for name in ("width", "min_angle"):
        pts = [(rec.eps, getattr(rec, name)) for rec in tail if _finite(getattr(rec, name))]
        try:
            trend[name] = linear_fit(pts)[0]
        except ValueError:
            trend[name] = mp.nan
            notes.append(f"{name} trend unavailable")
    h8 = [rec.seminorms[-1] for rec in records if rec.eps >= first.eps]
    h8_growth = max(h8) / h8[0] if h8[0] > 0 else mp.inf
    angles = [rec.min_angle for rec in records if _finite(rec.min_angle)]
    min_seen = min(angles) if angles else mp.nan
    if h8_growth >= H_GROWTH_SIGNATURE:
        if angles and min_seen >= angle_floor:
            signature = "loss-of-regularity"
        elif angles:
            signature = "bundle-collapse"
        else:
            signature = "loss-of-regularity"
            notes.append("no bundle angles recorded")
    else:
        signature = "none"
    return BreakdownReport(rows=rows, log_h_slopes=slopes, width_slope=trend["width"],
                           angle_slope=trend["min_angle"], h8_growth=h8_growth,
                           min_angle_floor_seen=min_seen, signature=signature, notes=notes)


def observable_table(records, specs) -> list:
    """Rows ``(eps, value per observable)`` for plotting the scale-invariant ratios."""
    return [(rec.eps, [scale_invariant_observable(rec.H, s) for s in specs]) for rec in records]


STANDARD_OBSERVABLES = (
    "H1H4/(H2H3)",
    "H1³H3²H4²/(H1H2⁴H4²)",
    "H1H2H5²/(H2²H4H5)",
    "H1H3H4²H5²/(H2²H4²H5²)",
    "H1⁵H4²/(H1⁴H2H3H4)",
    "H1⁴H3/(H1³H2²)",
)
