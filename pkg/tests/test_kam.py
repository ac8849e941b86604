import random
from dataclasses import replace

import pytest
from mpmath import mp

from spinkam import kam
from spinkam.bundles import adapted_frame, reducibility_defect
from spinkam.fourier import FourierSeries, tail_fraction_norm
from spinkam.kam import (ContinuationConfig, ContinuationRecord, ContinuationStall, ConvergenceError,
                         TorusSolution, continue_family, drift_for_frequency, frequency,
                         frequency_from_continued_fraction, integrable_torus, invariance_error, newton_step,
                         normalize_phase, read_log, read_torus, solve_torus, write_log, write_torus)
from spinkam.model import ModelParams, Variant, lbar_nbar
from spinkam.numerics import eps_digits


def _averaged_attractor(L=16, omega="omega1"):
    return integrable_torus(frequency(omega), ModelParams(eps=0, ecc=0, mu="1e-3", variant=Variant.AVERAGED), L)


def _perturb_K2(sol, modes):
    K2 = sol.K2 + FourierSeries.from_modes(modes, sol.L)
    return replace(sol, K2=K2, residual=mp.inf, evaluation=None)


def test_frequencies():
    mp.dps = 40
    assert abs(frequency("omega1") - mp.phi) < eps_digits(1)
    assert abs(frequency("omega2") - frequency_from_continued_fraction("[1; 2, 1, 1, ...]")) < eps_digits(2)
    assert abs(frequency("omega1") - frequency_from_continued_fraction("[1; 1, ...]")) < eps_digits(2)
    with pytest.raises(ValueError):
        frequency("omega3")
    with pytest.raises(ValueError):
        frequency_from_continued_fraction("1; 2")


def test_drift_for_frequency_solves_the_average_condition():
    mp.dps = 40
    w = frequency("omega2")
    e = drift_for_frequency(w)
    L, N = lbar_nbar(e)
    assert abs(N / L - w) < eps_digits(5)
    assert abs(e - mp.mpf("0.250207")) < mp.mpf("2e-6")
    with pytest.raises(ValueError):
        drift_for_frequency(mp.mpf("0.5"))


def test_averaged_attractor_is_exact():
    mp.dps = 30
    _, _, norm = invariance_error(_averaged_attractor())
    assert norm < eps_digits(3)


@pytest.mark.parametrize("omega", ["0.3", "1.7"])
def test_shear_map_torus_is_exact(omega):
    mp.dps = 30
    w = mp.mpf(omega)
    p = ModelParams(eps=0, ecc="0.2", mu=0)
    sol = TorusSolution(u=FourierSeries.zeros(8), K2=FourierSeries.constant(w / (2 * mp.pi), 8), ecc=p.ecc,
                        omega=w, residual=mp.inf, lam=1, params=p)
    _, _, norm = invariance_error(sol)
    assert norm < eps_digits(3)


def test_first_order_response_to_a_perturbation():
    mp.dps = 30
    sol = _perturb_K2(_averaged_attractor(), {1: mp.mpf("0.5e-10")})
    _, _, norm = invariance_error(sol)
    assert mp.mpf("1e-11") <= norm <= mp.mpf("1e-9")


def test_newton_fixes_an_exact_solution():
    mp.dps = 30
    sol = _averaged_attractor()
    new = newton_step(sol)
    assert abs(new.ecc - sol.ecc) < eps_digits(3)
    assert new.residual < eps_digits(3)
    assert max(abs(a - b) for a, b in zip(new.K2.coeffs, sol.K2.coeffs)) < eps_digits(3)


@pytest.mark.parametrize("seed", range(5))
def test_newton_step_is_quadratic(seed):
    mp.dps = 30
    rng = random.Random(seed)
    modes = {k: mp.mpc(rng.uniform(-1, 1), rng.uniform(-1, 1)) * mp.mpf("1e-6") / 3 for k in range(1, 4)}
    modes[0] = mp.mpf(rng.uniform(-1, 1)) * mp.mpf("1e-6") / 3
    sol = _perturb_K2(_averaged_attractor(), modes)
    _, _, before = invariance_error(sol)
    assert before > mp.mpf("1e-8")
    after = newton_step(sol).residual
    assert after <= mp.mpf("1e4") * mp.mpf("1e-6") ** 2


def test_small_perturbation_drift_near_average_root():
    mp.dps = 30
    w = frequency("omega2")
    cfg = ContinuationConfig(newton_tol="1e-24", tail_lo="1e-40", tail_hi="1e-22", L_min=16, L_max=128)
    start = integrable_torus(w, ModelParams(eps=0, ecc=0, mu="1e-3"), L=16)
    start = solve_torus(start, cfg)
    guess = replace(start, params=start.params.replace(eps=mp.mpf("1e-4")), residual=mp.inf, evaluation=None)
    history = []
    sol = solve_torus(guess, cfg, history=history)
    assert sol.residual < cfg.newton_tol
    assert abs(sol.ecc - drift_for_frequency(w)) < mp.mpf("1e-3")
    # quadratic on the first mesh, before its truncation floor (about 1e-13 at L = 16)
    r0, r1, r2 = history[:3]
    assert r1 <= 1e4 * r0**2 and r2 <= 1e4 * r1**2


def test_solve_exact_guess_needs_no_iteration():
    mp.dps = 30
    cfg = ContinuationConfig(newton_tol="1e-26", tail_lo="1e-60", tail_hi="1e-20", L_min=16)
    history = []
    sol = solve_torus(_averaged_attractor(), cfg, history=history)
    assert len(history) <= 2 and sol.residual < cfg.newton_tol


def test_solve_remeshes_a_truncated_guess(small_torus):
    mp.dps = 30
    sol, cfg = small_torus
    coarse = replace(sol.with_mesh(sol.L // 2), residual=mp.inf)
    out = solve_torus(coarse, cfg)
    assert out.L > coarse.L
    assert out.residual < cfg.newton_tol


def test_solve_reports_divergence():
    mp.dps = 30
    cfg = ContinuationConfig(newton_tol="1e-26", tail_lo="1e-60", tail_hi="1e-20", L_min=16, L_max=16,
                             max_newton_iters=4)
    far = _perturb_K2(_averaged_attractor(), {1: mp.mpf("0.2"), 3: mp.mpf("0.1")})
    with pytest.raises(ConvergenceError):
        solve_torus(far, cfg)


def test_converged_torus_properties(small_torus):
    mp.dps = 30
    sol, cfg = small_torus
    assert sol.u.mean() == 0
    assert sol.K2.mode(0).imag == 0
    _, _, norm = invariance_error(sol)
    assert norm < cfg.newton_tol
    frame = adapted_frame(sol)
    assert reducibility_defect(frame, sol.lam) < 1000 * norm


def test_phase_normalization_reparametrizes():
    mp.dps = 30
    rng = random.Random(2)
    u = FourierSeries.from_modes({k: mp.mpc(rng.uniform(-1, 1), rng.uniform(-1, 1)) / 20 for k in range(4)}, 16)
    K2 = FourierSeries.from_modes({k: mp.mpc(rng.uniform(-1, 1), rng.uniform(-1, 1)) for k in range(4)}, 16)
    tau = u.mean()
    u2, K22 = normalize_phase(u, K2)
    assert u2.mean() == 0
    th = mp.mpf("0.37")
    assert abs(th + u2(th) - (th - tau + u(th - tau))) < eps_digits(3)
    assert abs(K22(th) - K2(th - tau)) < eps_digits(3)


def test_config_validation():
    with pytest.raises(ValueError):
        ContinuationConfig(tail_lo="1e-20", tail_hi="1e-30")
    with pytest.raises(ValueError):
        ContinuationConfig(L_max=1000)
    with pytest.raises(ValueError):
        ContinuationConfig(newton_tol=0)
    with pytest.raises(ValueError):
        ContinuationConfig(eps_step_min="1e-2", eps_step_max="1e-3")
    cfg = ContinuationConfig()
    assert cfg.L_max == 65536 and cfg.max_newton_iters == 10


def test_torus_file_round_trip(tmp_path, small_torus):
    mp.dps = 30
    sol, _ = small_torus
    path = tmp_path / "t.txt"
    write_torus(path, sol)
    back = read_torus(path)
    assert back.L == sol.L and back.ecc == sol.ecc and back.omega == sol.omega
    assert back.params == sol.params
    assert list(back.u.coeffs) == list(sol.u.coeffs) and list(back.K2.coeffs) == list(sol.K2.coeffs)
    head = path.read_text().splitlines()[0].split()
    assert head[5:] == [str(sol.L), "30", Variant.NON_AVERAGED.value]
    path.write_text("\n".join(path.read_text().splitlines()[:-1]))
    with pytest.raises(ValueError):
        read_torus(path)


def _record(eps):
    h = tuple(mp.mpf(r) / 7 for r in range(1, 9))
    return ContinuationRecord(eps=mp.mpf(eps), ecc=mp.mpf("0.31"), residual=mp.mpf("1e-40"), L=64,
                              seminorms=h, min_angle=mp.nan, width=mp.mpf("0.1"), wall_time=1.5)


def test_log_round_trip(tmp_path):
    mp.dps = 30
    path = tmp_path / "c.log"
    write_log(path, [_record("1e-3")])
    kam.append_log(path, _record("2e-3"))
    recs = read_log(path)
    assert [r.eps for r in recs] == [mp.mpf("1e-3"), mp.mpf("2e-3")]
    assert mp.isnan(recs[0].min_angle) and recs[0].H(8) == mp.mpf(8) / 7
    fresh = tmp_path / "fresh.log"
    kam.append_log(fresh, _record("1e-3"))
    assert len(read_log(fresh)) == 1
    (tmp_path / "bad.log").write_text("a,b\n")
    with pytest.raises(ValueError):
        read_log(tmp_path / "bad.log")


def test_continuation_stall_reports_last_good_eps():
    mp.dps = 30
    cfg = ContinuationConfig(newton_tol="1e-60", tail_lo="1e-70", tail_hi="1e-20", L_min=16, L_max=16,
                             max_newton_iters=1, eps_step_init="1e-3", eps_step_min="2e-4")
    start = replace(_averaged_attractor(), residual=mp.mpf("1e-70"))
    with pytest.raises(ContinuationStall) as info:
        continue_family(start, "1e-2", cfg)
    assert info.value.last_eps == 0
    assert len(info.value.records) == 1


def test_continuation_marches_and_records():
    mp.dps = 30
    cfg = ContinuationConfig(newton_tol="1e-24", tail_lo="1e-40", tail_hi="1e-22", L_min=16, L_max=128,
                             eps_step_init="1e-4", eps_step_max="2e-4")
    start = _averaged_attractor()
    seen = []
    recs = continue_family(start, "4e-4", cfg, on_accept=lambda s, r: seen.append(s.eps))
    eps = [r.eps for r in recs]
    assert eps == sorted(eps) and eps[0] == 0 and eps[-1] == mp.mpf("4e-4")
    assert seen == eps
    # step grows by 3/2 up to the cap
    assert abs(eps[2] - eps[1] - mp.mpf("1.5e-4")) < eps_digits(5)
    assert all(r.residual < cfg.newton_tol for r in recs)
    assert all(len(r.seminorms) == 8 for r in recs)


def test_tail_violation_refines_even_when_converged(small_torus):
    mp.dps = 30
    sol, _ = small_torus
    coarse = replace(sol.with_mesh(sol.L // 2), residual=mp.inf)
    cfg = ContinuationConfig(newton_tol="1e-12", tail_lo="1e-40", tail_hi="1e-22", L_min=16, L_max=4 * sol.L)
    assert max(tail_fraction_norm(coarse.u), tail_fraction_norm(coarse.K2)) > cfg.tail_hi
    assert invariance_error(coarse)[2] < cfg.newton_tol
    out = solve_torus(coarse, cfg)
    assert out.L == sol.L
    assert max(tail_fraction_norm(out.u), tail_fraction_norm(out.K2)) <= cfg.tail_hi
