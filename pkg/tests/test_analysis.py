import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.integrate import quad
from scipy.optimize import linear_sum_assignment
from scipy.stats import norm

from rmfg.analysis import (
    ChaosRow,
    ChaosTable,
    NonPositiveValue,
    UnequalSizes,
    chaos_sweep,
    epsilon_rate,
    fit_loglog_slope,
    resample_to_common_size,
    w2sq_to_gaussian,
    wasserstein2_1d,
    wasserstein2_quantile,
    write_chaos_csv,
)
from rmfg.game_model import catalog_spec
from rmfg.nplayer_sim import OracleStrategy

finite = st.floats(-100, 100, allow_nan=False)


def sample(n):
    return arrays(float, n, elements=finite)


def test_examples():
    assert wasserstein2_1d([0, 1], [0, 1]) == 0.0
    assert wasserstein2_1d([0], [1]) == 1.0
    assert wasserstein2_1d([0, 2], [1, 3]) == 1.0


def test_unequal_sizes_rejected():
    with pytest.raises(UnequalSizes):
        wasserstein2_1d([0, 1], [0])


@given(st.integers(1, 12).flatmap(lambda n: st.tuples(sample(n), sample(n), sample(n))))
def test_metric_axioms(abc):
    a, b, c = abc
    assert wasserstein2_1d(a, a) == 0.0
    assert wasserstein2_1d(a, b) == pytest.approx(wasserstein2_1d(b, a), abs=1e-12)
    assert wasserstein2_1d(a, c) <= wasserstein2_1d(a, b) + wasserstein2_1d(b, c) + 1e-9


@given(st.integers(1, 9).flatmap(lambda n: st.tuples(sample(n), sample(n))))
def test_sorted_pairing_matches_assignment(ab):
    a, b = ab
    cost = (a[:, None] - b[None, :]) ** 2
    r, c = linear_sum_assignment(cost)
    exact = math.sqrt(cost[r, c].mean())
    assert wasserstein2_1d(a, b) == pytest.approx(exact, rel=1e-9, abs=1e-9)


@given(st.integers(1, 12).flatmap(lambda n: st.tuples(sample(n), sample(n))))
def test_quantile_form_agrees_on_equal_sizes(ab):
    a, b = ab
    assert wasserstein2_quantile(a, b) == pytest.approx(wasserstein2_1d(a, b), rel=1e-9, abs=1e-9)


def test_quantile_form_unequal_sizes():
    # {0, 1} vs {0.5}: each half moves by 0.5
    assert wasserstein2_quantile([0.0, 1.0], [0.5]) == pytest.approx(0.5)
    assert wasserstein2_quantile([0.0, 1.0], [0.0, 0.0, 1.0, 1.0]) == 0.0


def test_resample_sizes():
    a, b = resample_to_common_size(np.arange(5.0), np.arange(9.0), np.random.default_rng(0))
    assert a.size == b.size == 5
    assert set(a) <= set(range(5))


@given(arrays(float, st.integers(1, 40), elements=st.floats(-4, 4)), st.floats(-1, 1), st.floats(0.1, 3))
def test_gaussian_distance_nonnegative(x, m, s):
    assert w2sq_to_gaussian(x, m, s) >= -1e-12


def test_gaussian_distance_against_quadrature():
    x = np.sort(np.random.default_rng(3).normal(0.3, 1.4, 7))
    n = x.size
    total = 0.0
    for k in range(n):
        total += quad(lambda u: (x[k] - (0.1 + 1.2 * norm.ppf(u))) ** 2, k / n, (k + 1) / n, limit=200)[0]
    assert w2sq_to_gaussian(x, 0.1, 1.2) == pytest.approx(total, rel=1e-7)


def test_gaussian_distance_point_mass():
    assert w2sq_to_gaussian([1.0, 3.0], 2.0, 0.0) == pytest.approx(1.0)


def test_epsilon_rate():
    assert epsilon_rate(16, 1) == pytest.approx(0.5)
    assert epsilon_rate(16, 4) == pytest.approx(0.5 * math.sqrt(1 + math.log(16)))
    assert epsilon_rate(16, 4) == pytest.approx(0.9712, abs=1e-4)
    for d in (1, 2, 3, 5):
        assert epsilon_rate(1, d) == 1.0


def test_slope_examples():
    Ns = [8, 16, 32, 64]
    s, _, se = fit_loglog_slope([(n, n**-0.5) for n in Ns])
    assert s == pytest.approx(-0.5, abs=1e-12)
    assert se == pytest.approx(0.0, abs=1e-12)
    assert fit_loglog_slope([(n, 3.0) for n in Ns])[0] == pytest.approx(0.0, abs=1e-12)
    s, c, _ = fit_loglog_slope([(n, 4.0 / n) for n in Ns])
    assert s == pytest.approx(-1.0)
    assert c == pytest.approx(math.log(4.0))


def test_slope_rejects_bad_input():
    with pytest.raises(NonPositiveValue):
        fit_loglog_slope([(1, 1.0), (2, 0.0), (4, 1.0)])
    with pytest.raises(ValueError):
        fit_loglog_slope([(1, 1.0), (2, 1.0)])


def test_chaos_table_checks_and_csv(tmp_path):
    rows = [ChaosRow(n, 10, 1.0 / n, 0.01) for n in (4, 8, 16)]
    tab = ChaosTable(rows, np.linspace(0, 1, 3), meta={"spec": "x"})
    assert tab.slope == pytest.approx(-1.0)
    assert tab.monotone_within_ci()
    lo, hi = tab.slope_ci()
    assert lo <= tab.slope <= hi
    write_chaos_csv(tab, tmp_path / "c.csv")
    assert (tmp_path / "c.csv").read_text().startswith("# chaos table spec=x")
    with pytest.raises(ValueError):
        ChaosTable(rows[::-1], np.zeros(1))


def test_monotone_detects_increase():
    rows = [ChaosRow(4, 10, 0.1, 0.001), ChaosRow(8, 10, 0.2, 0.001), ChaosRow(16, 10, 0.05, 0.001)]
    assert not ChaosTable(rows, np.zeros(1)).monotone_within_ci()


def test_chaos_reference_block_self_distance():
    from rmfg.analysis import wasserstein2_quantile as w2
    x = np.random.default_rng(1).standard_normal(64)
    assert w2(x, x) == 0.0


def test_chaos_sweep_decreases_and_stderr_scales():
    spec = catalog_spec("lq-mean-drift")
    src = OracleStrategy(spec)
    small = chaos_sweep(spec, src, [4, 16, 64], reps=60, n_t=16, seed=2)
    assert small.rows[0].estimate > small.rows[-1].estimate
    assert small.slope < 0
    big = chaos_sweep(spec, src, [4, 16, 64], reps=120, n_t=16, seed=2)
    ratio = big.rows[1].stderr / small.rows[1].stderr
    assert ratio == pytest.approx(1 / math.sqrt(2), rel=0.3)


def test_chaos_sweep_without_exact_law():
    spec = catalog_spec("lq-mean-drift")

    class NoSol:
        def __init__(self, inner):
            self.inner = inner

        def feedback(self, *a):
            return self.inner.feedback(*a)

        def limit_law(self, *a):
            return self.inner.limit_law(*a)

    tab = chaos_sweep(spec, NoSol(OracleStrategy(spec)), [4, 8, 16], reps=20, n_t=16, seed=3, ref_factor=4)
    assert tab.meta["reference"] == "block-64"
    assert all(r.estimate > 0 for r in tab.rows)


def test_chaos_grid_must_align():
    spec = catalog_spec("lq")
    with pytest.raises(ValueError):
        chaos_sweep(spec, OracleStrategy(spec), [4, 8, 16], reps=5, n_t=20)
