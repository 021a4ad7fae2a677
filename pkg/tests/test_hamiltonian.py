import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.optimize import brentq

from rmfg.game_model import MeasureArg, catalog_spec
from rmfg.hamiltonian import alpha_hat, growth_bound, hamiltonian_value, minimize

DIRAC0 = MeasureArg.dirac([0.0])
# root of a^3 + a + 1 = 0, from a bracketing solver run once
QUARTIC_ROOT = -0.6823278038280193


def test_quartic_root_oracle():
    assert brentq(lambda a: a**3 + a + 1, -2.0, 0.0, xtol=1e-15) == pytest.approx(QUARTIC_ROOT, abs=1e-14)


def test_value_zero(unit_lq):
    z = np.zeros(1)
    assert hamiltonian_value(unit_lq, 0.0, z, DIRAC0, z, z, None, 0) == 0.0


def test_value_example(unit_lq):
    z, o = np.zeros(1), np.ones(1)
    assert hamiltonian_value(unit_lq, 0.0, z, DIRAC0, o, o, None, 0) == pytest.approx(1.5)


def test_q_identity_adds_trace(unit_lq):
    z, o = np.zeros(1), np.ones(1)
    h0 = hamiltonian_value(unit_lq, 0.0, z, DIRAC0, o, o, None, 0)
    h1 = hamiltonian_value(unit_lq, 0.0, z, DIRAC0, o, o, np.eye(1), 0)
    assert h1 - h0 == pytest.approx(1.0)


def test_unit_minimizer(unit_lq):
    a = alpha_hat(unit_lq, 0.0, np.zeros(1), DIRAC0, np.array([2.0]), 0)
    assert a[0] == pytest.approx(-2.0)


def test_quartic_minimizer(smooth):
    res = minimize(smooth, 0.0, np.zeros(1), DIRAC0, np.ones(1), 0)
    assert not res.closed_form
    assert res.alpha_hat[0] == pytest.approx(QUARTIC_ROOT, abs=1e-9)


def test_zero_costate(smooth):
    a = alpha_hat(smooth, 0.0, np.zeros(1), DIRAC0, np.zeros(1), 0)
    assert a[0] == 0.0


@given(st.floats(-5, 5), st.floats(-3, 3), st.integers(0, 1), st.floats(-0.5, 0.5))
def test_minimizer_is_optimal_and_bounded(p, x, i, da):
    spec = catalog_spec("smooth-nonquadratic-test")
    xv, pv = np.array([x]), np.array([p])
    res = minimize(spec, 0.2, xv, DIRAC0, pv, i)
    assert res.gradient_norm_at_opt <= 1e-8
    h_opt = hamiltonian_value(spec, 0.2, xv, DIRAC0, res.alpha_hat, pv, None, i)
    h_other = hamiltonian_value(spec, 0.2, xv, DIRAC0, res.alpha_hat + da, pv, None, i)
    assert h_opt <= h_other + 1e-12
    assert abs(res.alpha_hat[0]) <= growth_bound(spec, 0.2, xv, DIRAC0, pv, i) + 1e-12


@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(-3, 3))
def test_minimizer_lipschitz_in_costate(p1, p2, x):
    spec = catalog_spec("smooth-nonquadratic-test")
    xv = np.array([x])
    a1 = alpha_hat(spec, 0.0, xv, DIRAC0, np.array([p1]), 0)
    a2 = alpha_hat(spec, 0.0, xv, DIRAC0, np.array([p2]), 0)
    # |b2| / lam = 1 for the test family
    assert abs(a1[0] - a2[0]) <= abs(p1 - p2) + 1e-9


def test_batched_matches_pointwise(smooth):
    ps = np.linspace(-3, 3, 7)[:, None]
    batch = alpha_hat(smooth, 0.0, np.zeros((7, 1)), DIRAC0, ps, 1)
    single = np.array([alpha_hat(smooth, 0.0, np.zeros(1), DIRAC0, p, 1) for p in ps])
    assert np.allclose(batch, single, atol=1e-12)
