import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from mpmath import mp

from spinkam import flowmap
from spinkam.flowmap import (IntegrationError, Jet, TaylorConfig, conformality_check, poincare_map,
                             poincare_map_grid, taylor_step)
from spinkam.model import ModelParams, Variant, conformal_factor, lbar_nbar, vector_field, vector_field_time


def _rk4(field, state, t0, t1, n, params):
    h = (t1 - t0) / n
    for j in range(n):
        t = t0 + j * h
        k1 = field(state, t, params)
        k2 = field([a + h / 2 * b for a, b in zip(state, k1)], t + h / 2, params)
        k3 = field([a + h / 2 * b for a, b in zip(state, k2)], t + h / 2, params)
        k4 = field([a + h * b for a, b in zip(state, k3)], t + h, params)
        state = [a + h / 6 * (b1 + 2 * b2 + 2 * b3 + b4) for a, b1, b2, b3, b4 in zip(state, k1, k2, k3, k4)]
    return state


def test_config_validation():
    with pytest.raises(ValueError):
        TaylorConfig(order=3, abs_tol=1e-10, rel_tol=1e-10)
    with pytest.raises(ValueError):
        TaylorConfig(order=10, abs_tol=0, rel_tol=1e-10)
    mp.dps = 40
    cfg = TaylorConfig.for_precision()
    assert cfg.order == 40 and cfg.abs_tol == mp.mpf("1e-40")
    assert TaylorConfig.for_precision(20).order == 24


def test_free_rotation_step():
    mp.dps = 30
    p = ModelParams(eps=0, ecc=0, mu=0)
    cfg = TaylorConfig.for_precision()
    state = [Jet(mp.zero, 1), Jet(mp.mpf("1.5"), d_y0=1), Jet(mp.zero), Jet(mp.one)]
    out, h = taylor_step(state, 0, cfg, p)
    assert h > 0
    assert abs(out[0].value - mp.mpf("1.5") * h) < mp.mpf("1e-28")
    assert abs(out[0].d_y0 - h) < mp.mpf("1e-28")
    assert abs(out[0].d_x0 - 1) < mp.mpf("1e-28")


def test_step_against_two_half_steps():
    mp.dps = 30
    p = ModelParams(eps="1e-2", ecc="0.3", mu="1e-3")
    cfg = TaylorConfig.for_precision(30)
    x0, y0 = mp.mpf("0.7"), mp.mpf("1.3")
    state = [Jet(x0, 1), Jet((1 - p.ecc) * y0, d_y0=1 - p.ecc, d_e=-y0),
             Jet(mp.sin(2 * x0), 2 * mp.cos(2 * x0)), Jet(mp.cos(2 * x0), -2 * mp.sin(2 * x0))]
    u0 = mp.mpf("0.4")
    full, h = taylor_step(state, u0, cfg, p)
    eng = flowmap._Engine(p, cfg, jets=True)
    F = eng.F
    st_ = np.zeros((16, 1), dtype=object)
    for i, jet in enumerate(state):
        for k, v in enumerate(jet.parts()):
            st_[4 * i + k, 0] = flowmap._to_fix(v, F)
    u_fix, h_fix = flowmap._to_fix(u0, F), flowmap._to_fix(h, F)
    st_ = flowmap._integrate(eng, st_, u_fix, u_fix + h_fix // 2)
    st_ = flowmap._integrate(eng, st_, u_fix + h_fix // 2, u_fix + h_fix)
    half = [Jet(*(flowmap._from_fix(st_[4 * i + k, 0], F) for k in range(4))) for i in range(4)]
    for a, b in zip(full, half):
        for va, vb in zip(a.parts(), b.parts()):
            assert abs(va - vb) <= 10 * cfg.abs_tol * max(1, abs(va))


def test_integrable_map_is_a_shear():
    mp.dps = 30
    p = ModelParams(eps=0, ecc="0.2", mu=0)
    x0, y0 = mp.mpf("0.3"), mp.mpf("1.25")
    r = poincare_map(x0, y0, p)
    assert abs(r.x.value - (x0 + 2 * mp.pi * y0)) < mp.mpf("1e-27")
    assert abs(r.y.value - y0) < mp.mpf("1e-27")
    D = r.differential()
    expected = [[1, 2 * mp.pi], [0, 1]]
    for i in range(2):
        for j in range(2):
            assert abs(D[i][j] - expected[i][j]) < mp.mpf("1e-27")


def test_averaged_unperturbed_closed_form():
    mp.dps = 40
    p = ModelParams(eps=0, ecc="0.2", mu="1e-3", variant=Variant.AVERAGED)
    L, N = lbar_nbar(p.ecc)
    ybar = N / L
    Lam = mp.exp(-2 * mp.pi * p.mu * L)
    x0, y0 = mp.mpf("0.5"), mp.mpf("1.2")
    r = poincare_map(x0, y0, p)
    assert abs(r.y.value - (ybar + (y0 - ybar) * Lam)) < mp.mpf("1e-37")
    x_ref = x0 + 2 * mp.pi * ybar + (y0 - ybar) * (1 - Lam) / (p.mu * L)
    assert abs(r.x.value - x_ref) < mp.mpf("1e-36")
    assert conformality_check(x0, y0, p) < mp.mpf("1e-37")


def test_nonaveraged_map_against_rk4_reference():
    mp.dps = 30
    p = ModelParams(eps="1e-3", ecc="0.2", mu="1e-3")
    x0, y0 = mp.mpf(1), mp.mpf("1.4")
    e = p.ecc
    ref = _rk4(vector_field, [x0, (1 - e) * y0, mp.sin(2 * x0), mp.cos(2 * x0)], mp.zero, 2 * mp.pi, 4000, p)
    r = poincare_map(x0, y0, p)
    assert abs(r.x.value - ref[0]) < mp.mpf("1e-12")
    assert abs(r.y.value - ref[1] / (1 - e)) < mp.mpf("1e-12")


def test_circular_orbit_matches_time_form():
    mp.dps = 30
    p = ModelParams(eps="5e-3", ecc=0, mu="1e-3")
    x0, y0 = mp.mpf("0.2"), mp.mpf("1.1")
    ref = _rk4(vector_field_time, [x0, y0, mp.sin(2 * x0), mp.cos(2 * x0)], mp.zero, 2 * mp.pi, 4000, p)
    r = poincare_map(x0, y0, p)
    assert abs(r.x.value - ref[0]) < mp.mpf("1e-12")
    assert abs(r.y.value - ref[1]) < mp.mpf("1e-12")


@settings(max_examples=8)
@given(st.floats(0, 6.28), st.floats(0.8, 2.0), st.sampled_from(list(Variant)))
def test_determinant_equals_conformal_factor(x0, y0, variant):
    mp.dps = 30
    p = ModelParams(eps="5e-3", ecc="0.2", mu="1e-3", variant=variant)
    r = poincare_map(x0, y0, p)
    (a, b), (c, d) = r.differential()
    assert abs(a * d - b * c - conformal_factor(p.ecc, p.mu)) < mp.mpf("1e-26")


def test_symplectic_limit():
    mp.dps = 30
    p = ModelParams(eps="1e-2", ecc="0.25", mu=0)
    assert conformality_check("0.4", "1.5", p) < mp.mpf("1e-27")


def test_jets_match_centered_differences():
    mp.dps = 30
    p = ModelParams(eps="1e-2", ecc="0.25", mu="1e-3")
    x0, y0 = mp.mpf("0.4"), mp.mpf("1.5")
    r = poincare_map(x0, y0, p)
    d = mp.mpf(10) ** (-mp.dps // 3)

    def image(x, y, e):
        out = poincare_map(x, y, p.replace(ecc=e))
        return mp.matrix([out.x.value, out.y.value])

    partials = [(image(x0 + d, y0, p.ecc) - image(x0 - d, y0, p.ecc)) / (2 * d),
                (image(x0, y0 + d, p.ecc) - image(x0, y0 - d, p.ecc)) / (2 * d),
                (image(x0, y0, p.ecc + d) - image(x0, y0, p.ecc - d)) / (2 * d)]
    jets = [(r.x.d_x0, r.y.d_x0), (r.x.d_y0, r.y.d_y0), (r.x.d_e, r.y.d_e)]
    for fd, jet in zip(partials, jets):
        for a, b in zip(fd, jet):
            assert abs(a - b) < mp.mpf("1e-16") * max(1, abs(b))


def test_compiled_and_python_backends_agree():
    mp.dps = 60
    p = ModelParams(eps="1e-2", ecc="0.3", mu="1e-3")
    xs, ys = [mp.mpf("0.1"), mp.mpf("2.5")], [mp.mpf("1.3"), mp.mpf("1.7")]
    fast = poincare_map_grid(xs, ys, p, TaylorConfig.for_precision(), workers=1)
    cfg = TaylorConfig.for_precision()
    cfg.backend = "python"
    slow = poincare_map_grid(xs, ys, p, cfg, workers=1)
    for name in ("x", "y"):
        for a, b in zip(getattr(fast, name), getattr(slow, name)):
            assert abs(a - b) < mp.mpf("1e-55")
    for a, b in zip(fast.dx.flat, slow.dx.flat):
        assert abs(a - b) < mp.mpf("1e-53")


def test_grid_is_independent_of_worker_count():
    mp.dps = 30
    p = ModelParams(eps="1e-2", ecc="0.3", mu="1e-3")
    xs = [mp.mpf(j) / 3 for j in range(6)]
    ys = [mp.mpf("1.4")] * 6
    one = poincare_map_grid(xs, ys, p, workers=1)
    two = poincare_map_grid(xs, ys, p, workers=2)
    assert list(one.x) == list(two.x) and list(one.y) == list(two.y)
    assert list(one.dx.flat) == list(two.dx.flat)


def test_step_budget_exhaustion():
    mp.dps = 30
    p = ModelParams(eps="1e-2", ecc="0.3", mu="1e-3")
    cfg = TaylorConfig(order=10, abs_tol="1e-30", rel_tol="1e-30", max_steps=3)
    with pytest.raises(IntegrationError):
        poincare_map_grid([0], [1], p, cfg, workers=1)


def test_double_orbit_agrees_with_multiprecision():
    mp.dps = 30
    p = ModelParams(eps="1e-3", ecc="0.2", mu="1e-3")
    g = flowmap.orbit_gammas_double(0.3, 1.3, p, 0, 3)
    x, y = mp.mpf("0.3"), mp.mpf("1.3")
    for j in range(3):
        r = poincare_map_grid([x], [y], p, jets=False, workers=1)
        x, y = r.x[0], r.y[0]
        assert abs(g[j] - float((1 - p.ecc) * y)) < 1e-12
