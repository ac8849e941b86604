import pytest
from hypothesis import HealthCheck, settings
from mpmath import mp

settings.register_profile("spinkam", deadline=None, max_examples=25,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("spinkam")


@pytest.fixture(autouse=True)
def _restore_precision():
    old = mp.dps
    yield
    mp.dps = old


@pytest.fixture
def dps40():
    mp.dps = 40
    return 40


@pytest.fixture(scope="session")
def small_torus():
    """Non-averaged omega1 torus at eps = 1e-3, solved at 30 digits."""
    from dataclasses import replace

    from spinkam.kam import ContinuationConfig, frequency, integrable_torus, solve_torus
    from spinkam.model import ModelParams

    old = mp.dps
    mp.dps = 30
    try:
        cfg = ContinuationConfig(newton_tol="1e-24", tail_lo="1e-40", tail_hi="1e-22", L_min=32, L_max=256)
        sol = integrable_torus(frequency("omega1"), ModelParams(eps=0, ecc=0, mu="1e-3"), L=32)
        sol = solve_torus(sol, cfg)
        guess = replace(sol, params=sol.params.replace(eps=mp.mpf("1e-3")), residual=mp.inf, evaluation=None)
        return solve_torus(guess, cfg), cfg
    finally:
        mp.dps = old
