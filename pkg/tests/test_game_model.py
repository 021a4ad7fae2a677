import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from rmfg.game_model import (
    DimensionMismatch,
    LqParams,
    MeasureArg,
    TimeOutOfRange,
    build_lq_spec,
    catalog_spec,
    eval_coefficients,
    validate_spec,
)
from rmfg.hamiltonian import alpha_hat
from rmfg.regime_chain import validate_generator


def test_unit_lq_minimizer_is_minus_p(unit_lq):
    p = np.array([[0.3], [-1.7]])
    a = alpha_hat(unit_lq, 0.0, np.zeros((2, 1)), MeasureArg.dirac([0.0]), p, 0)
    assert np.allclose(a, -p, atol=1e-14)


def test_identical_regimes_give_identical_coefficients():
    spec = catalog_spec("lq-mean-drift", generator=[[-1.0, 1.0], [1.0, -1.0]], Qx=1.0, s=0.5,
                        G=1.0, sg=0.5, b1=0.0, c=0.3, sigma=0.8)
    x = np.array([[0.4], [-1.2]])
    mu = MeasureArg.moments([0.2], 1.0)
    a = np.array([[0.1], [0.5]])
    c0 = eval_coefficients(spec, 0.3, x, mu, a, 0)
    c1 = eval_coefficients(spec, 0.3, x, mu, a, 1)
    for u, v in zip(c0, c1):
        assert np.array_equal(u, v)


def test_r2_minimizer():
    Q = validate_generator([[0.0]])
    spec = build_lq_spec(LqParams.build(R=2.0), Q, 1.0, [0.0])
    a = alpha_hat(spec, 0.0, np.zeros(1), MeasureArg.dirac([0.0]), np.ones(1), 0)
    assert a[0] == pytest.approx(-0.5, abs=1e-15)


def test_catalog_specs_validate():
    for name in ("lq", "lq-mean-drift", "smooth-nonquadratic-test"):
        rep = validate_spec(catalog_spec(name), sample_budget=1000, rng=np.random.default_rng(1))
        assert rep.passed, rep.lines()


def test_convexity_modulus_estimate(unit_lq):
    rep = validate_spec(unit_lq, sample_budget=10_000, rng=np.random.default_rng(2))
    assert rep.get("convexity").estimate >= 0.99


def test_concave_cost_fails_convexity(unit_lq):
    bad = unit_lq.with_(
        f=lambda t, x, mu, a, i: -np.sum(np.asarray(a) ** 2, axis=-1),
        grad_a_f=lambda t, x, mu, a, i: -2.0 * np.asarray(a),
        hess_a_f=None,
    )
    rep = validate_spec(bad, rng=np.random.default_rng(3))
    assert rep.get("convexity").status == "FAIL"
    assert rep.get("convexity").witness is not None


def test_zero_volatility_fails_ellipticity():
    spec = catalog_spec("lq", sigma=0.0)
    rep = validate_spec(spec, rng=np.random.default_rng(4))
    assert rep.get("ellipticity").status == "FAIL"


def test_coefficients_at_origin(unit_lq):
    c = eval_coefficients(unit_lq, 0.0, np.zeros(1), MeasureArg.dirac([0.0]), np.zeros(1), 0)
    assert np.all(c.b == 0.0)
    assert c.f == 0.0


def test_state_cost_vanishes_on_coupling_target():
    spec = catalog_spec("lq", s=1.0)
    c = eval_coefficients(spec, 0.0, np.ones(1), MeasureArg.dirac([1.0]), np.zeros(1), 0)
    assert c.f == 0.0


def test_control_cost_half(unit_lq):
    c = eval_coefficients(unit_lq, 0.0, np.zeros(1), MeasureArg.dirac([0.0]), np.ones(1), 0)
    assert c.f == pytest.approx(0.5)


def test_time_checked(unit_lq):
    with pytest.raises(TimeOutOfRange):
        eval_coefficients(unit_lq, 1.5, np.zeros(1), MeasureArg.dirac([0.0]), np.zeros(1), 0)


def test_dimension_checked():
    Q = validate_generator([[-1.0, 1.0], [1.0, -1.0]])
    with pytest.raises(DimensionMismatch):
        build_lq_spec(LqParams.build(3), Q, 1.0, [0.0])
    with pytest.raises(DimensionMismatch):
        build_lq_spec(LqParams.build(2), Q, 1.0, [0.0, 1.0])


def test_unknown_catalog_entry():
    with pytest.raises(KeyError):
        catalog_spec("nope")
    with pytest.raises(KeyError):
        catalog_spec("lq", bogus=1.0)


def test_measure_identical_particles():
    mu = MeasureArg.empirical(np.ones((5, 1)))
    assert mu.mean[0] == 1.0
    assert mu.variance == pytest.approx(0.0)


def test_measure_two_particles():
    mu = MeasureArg.empirical([[0.0], [2.0]])
    assert mu.mean[0] == 1.0
    assert float(mu.second_moment) == 2.0


@given(arrays(float, st.tuples(st.integers(1, 30), st.integers(1, 3)),
              elements=st.floats(-1e3, 1e3)))
def test_empirical_measure_properties(pts):
    mu = MeasureArg.empirical(pts)
    assert mu.variance >= -1e-9 * (1 + float(mu.second_moment))
    perm = MeasureArg.empirical(pts[::-1])
    assert np.allclose(perm.mean, mu.mean, rtol=1e-12, atol=1e-9)
