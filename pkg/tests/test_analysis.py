import random

import numpy as np
import pytest
from hypothesis import given, strategies as st
from mpmath import mp

from spinkam.analysis import (STANDARD_OBSERVABLES, ObservableSpec, RotationConfig, Weight, basin_grid,
                              basin_header, basin_nodes, basin_rows, breakdown_report, observable_table,
                              read_basin, rotation_number, scale_invariant_observable, transient_length,
                              weight, weighted_average)
from spinkam.fourier import FourierSeries, sobolev_seminorm
from spinkam.kam import ContinuationRecord
from spinkam.model import ModelParams, Variant, lbar_nbar


def test_weight_examples():
    mp.dps = 30
    assert abs(weight("0.5") - mp.exp(-16)) < mp.mpf("1e-36")
    assert weight(0) == 0 and weight(1) == 0 and weight("1e-3") < mp.mpf("1e-1000")
    assert abs(weight("0.3") - weight("0.7")) < mp.mpf("1e-28") * weight("0.3")


def test_rotation_config_validation():
    with pytest.raises(ValueError):
        RotationConfig(n1=10, n2=10)
    with pytest.raises(ValueError):
        RotationConfig(delta=0)
    with pytest.raises(ValueError):
        transient_length(ModelParams(eps=0, ecc=0, mu=0), RotationConfig())
    mp.dps = 30
    n0 = transient_length(ModelParams(eps=0, ecc=0, mu="1e-3"), RotationConfig())
    assert n0 == int(mp.ceil(14 / (2 * mp.pi * mp.mpf("1e-3") * mp.log10(mp.e))))


@pytest.mark.parametrize("dps", [15, 30])
def test_pure_rotation(dps):
    mp.dps = dps
    cfg = RotationConfig(n1=10, n2=40, delta=5, n0_override=0)
    rho, ok = rotation_number(0, "1.38", ModelParams(eps=0, ecc=0, mu=0), cfg)
    assert ok
    assert abs(rho - mp.mpf("1.38")) < mp.mpf(10) ** (-dps + 2)


def test_averaged_attractor_rotation_number():
    mp.dps = 15
    p = ModelParams(eps=0, ecc="0.2", mu="1e-5", variant=Variant.AVERAGED)
    rho, ok = rotation_number(0, "1.38", p)
    L, N = lbar_nbar(p.ecc)
    assert ok and abs(rho - N / L) < mp.mpf("1e-10")


@given(st.floats(0, 6.28), st.floats(0, 6.28))
def test_independent_of_initial_angle_without_forcing(x0, x1):
    mp.dps = 15
    p = ModelParams(eps=0, ecc="0.2", mu="0.05")
    cfg = RotationConfig(n1=100, n2=200, delta=10)
    r0, _ = rotation_number(x0, "1.4", p, cfg)
    r1, _ = rotation_number(x1, "1.4", p, cfg)
    assert abs(r0 - r1) < mp.mpf("1e-12")


@given(st.lists(st.floats(-5, 5), min_size=20, max_size=20), st.integers(2, 21))
def test_unit_weight_is_the_plain_mean(values, n):
    mp.dps = 30
    samples = [mp.mpf(v) for v in values]
    got = weighted_average(samples, n, Weight.UNIT)
    assert abs(got - mp.fsum(samples[: n - 1]) / (n - 1)) < mp.mpf("1e-25")


def test_basin_of_pure_rotation():
    mp.dps = 15
    cfg = RotationConfig(n1=10, n2=40, delta=5, n0_override=0)
    nodes = basin_grid((0, 3, 1, 2), 3, 3, ModelParams(eps=0, ecc=0, mu=0), cfg, workers=1)
    assert [(n.x, n.y) for n in nodes] == basin_nodes((0, 3, 1, 2), 3, 3)
    for n in nodes:
        assert n.converged and abs(n.rho - n.y) < mp.mpf("1e-13")


def test_basin_node_layout():
    mp.dps = 15
    nodes = basin_nodes((0, 2, 1, 2), 2, 3)
    assert nodes == [(0, 1), (1, 1), (0, mp.mpf("1.5")), (1, mp.mpf("1.5")), (0, 2), (1, 2)]
    with pytest.raises(ValueError):
        basin_nodes((1, 1, 0, 2), 3, 3)
    with pytest.raises(ValueError):
        basin_nodes((0, 1, 0, 2), 1, 3)


def test_strongly_damped_window_has_one_attractor():
    mp.dps = 15
    p = ModelParams(eps="1e-3", ecc="0.2", mu="0.1")
    nodes = basin_grid((0, 6, 1, 2), 3, 3, p, workers=1)
    assert all(n.converged for n in nodes)
    assert max(n.rho for n in nodes) - min(n.rho for n in nodes) < mp.mpf("1e-8")


def test_basin_independent_of_workers():
    mp.dps = 15
    p = ModelParams(eps="1e-3", ecc="0.2", mu="0.1")
    one = basin_grid((0, 6, 1, 2), 2, 2, p, workers=1)
    two = basin_grid((0, 6, 1, 2), 2, 2, p, workers=2)
    assert [n.rho for n in one] == [n.rho for n in two]


def test_basin_file_round_trip(tmp_path):
    mp.dps = 15
    cfg = RotationConfig(n1=10, n2=40, delta=5, n0_override=0)
    p = ModelParams(eps=0, ecc=0, mu=0)
    nodes = basin_grid((0, 3, 1, 2), 3, 3, p, cfg, workers=1)
    path = tmp_path / "basin.csv"
    path.write_text("\n".join(basin_header(p, cfg, (0, 3, 1, 2), 3, 3) + basin_rows(nodes)) + "\n")
    back = read_basin(path)
    assert [(n.x, n.y, n.rho, n.converged) for n in back] == [(n.x, n.y, n.rho, n.converged) for n in nodes]
    assert "# n0 = 0" in path.read_text()


def test_observable_of_geometric_seminorms():
    mp.dps = 30
    spec = ObservableSpec((1, 1, -1, -1), (1, 4, 2, 3))
    a, c = mp.mpf("1.7"), mp.mpf("0.3")
    assert abs(scale_invariant_observable(lambda r: c * a**r, spec) - 1) < mp.mpf("1e-28")


@given(st.integers(0, 2**32), st.sampled_from([2, 4]), st.floats(0.5, 3))
def test_observable_is_scale_invariant(seed, eta, beta):
    mp.dps = 30
    rng = random.Random(seed)
    f = FourierSeries.from_modes({k: mp.mpc(rng.uniform(-1, 1), rng.uniform(-1, 1)) for k in range(8)}, 16)
    g = FourierSeries.zeros(64)
    for k in range(8):
        g.coeffs[eta * k] = f.coeffs[k] / mp.mpf(beta)
        if k:
            g.coeffs[64 - eta * k] = f.coeffs[16 - k] / mp.mpf(beta)
    for text in STANDARD_OBSERVABLES:
        spec = ObservableSpec.parse(text)
        vf = scale_invariant_observable(lambda r: sobolev_seminorm(f, r), spec)
        vg = scale_invariant_observable(lambda r: sobolev_seminorm(g, r), spec)
        assert abs(vf - vg) < mp.mpf("1e-25") * vf


def test_observable_validation():
    with pytest.raises(ValueError):
        ObservableSpec((1, -1), (1, 1, 2))
    with pytest.raises(ValueError):
        ObservableSpec((1, 1), (1, 2))
    with pytest.raises(ValueError):
        ObservableSpec((1, -1), (1, 2))
    with pytest.raises(ValueError):
        ObservableSpec.parse("H1H2/(H2H1)")
    spec = ObservableSpec.parse("H1H4/(H2H3)")
    assert spec.orders == (1, 2, 3, 4) and spec.gammas == (1, -1, -1, 1)
    merged = ObservableSpec.parse("H_1^{3}H_3^{2}H_4^{2}/(H_1H_2^{4}H_4^{2})")
    assert merged.gammas == (2, -4, 2) and merged.orders == (1, 2, 3)
    assert spec.label() == "H1^1 H2^-1 H3^-1 H4^1"


@given(st.lists(st.integers(-3, 3), min_size=3, max_size=3), st.lists(st.integers(1, 8), min_size=3, max_size=3))
def test_validator_matches_the_two_conditions(gammas, orders):
    ok = sum(gammas) == 0 and sum(g * r for g, r in zip(gammas, orders)) == 0
    if ok:
        ObservableSpec(tuple(gammas), tuple(orders))
    else:
        with pytest.raises(ValueError):
            ObservableSpec(tuple(gammas), tuple(orders))


def _log(h8, angles, eps=None):
    eps = eps or [mp.mpf(j) / 1000 for j in range(len(h8))]
    return [ContinuationRecord(eps=e, ecc=mp.mpf("0.31"), residual=mp.mpf("1e-40"), L=64,
                               seminorms=tuple([mp.one] * 7 + [mp.mpf(h)]), min_angle=mp.mpf(a),
                               width=mp.mpf("0.1") - e, wall_time=1.0)
            for e, h, a in zip(eps, h8, angles)]


def test_breakdown_constant_seminorms():
    mp.dps = 30
    rep = breakdown_report(_log([1] * 6, ["0.999"] * 6))
    assert rep.signature == "none" and rep.h8_growth == 1
    assert rep.lines()[0] == "signature = none"


def test_breakdown_blow_up_with_flat_angle():
    mp.dps = 30
    eps_c = mp.mpf("0.0126")
    eps = [mp.mpf(j) / 1000 for j in range(1, 13)]
    h8 = [(eps_c - e) ** -3 for e in eps]
    rep = breakdown_report(_log(h8, ["0.998"] * 12, eps))
    assert rep.signature == "loss-of-regularity"
    assert rep.h8_growth >= 1000
    assert rep.log_h_slopes[8] > 0 and rep.width_slope < 0


def test_breakdown_blow_up_with_collapsing_bundles():
    mp.dps = 30
    rep = breakdown_report(_log([1, 10, 1e3, 1e5], ["0.99", "0.5", "0.2", "0.01"]))
    assert rep.signature == "bundle-collapse"


def test_breakdown_needs_four_records():
    with pytest.raises(ValueError):
        breakdown_report(_log([1, 2, 3], ["0.999"] * 3))


def test_observable_table_rows():
    mp.dps = 30
    recs = _log([1, 2], ["0.999"] * 2)
    rows = observable_table(recs, [ObservableSpec.parse("H1H8/(H2H7)")])
    assert [r[0] for r in rows] == [0, mp.mpf("0.001")]
    assert rows[1][1][0] == 2
