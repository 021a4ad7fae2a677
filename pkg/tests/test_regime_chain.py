import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rmfg.regime_chain import (
    GridOutOfRange,
    NegativeOffDiagonal,
    RateBoundExceeded,
    RegimeOutOfRange,
    RegimePath,
    RowSumNonzero,
    martingale_ledger,
    occupation_times,
    sample_path,
    sample_paths,
    stationary_distribution,
    validate_generator,
    write_ledger_csv,
)
from rmfg.rng import stream

Q2 = [[-1.0, 1.0], [2.0, -2.0]]


def test_valid_generator():
    Q = validate_generator(Q2)
    assert Q.states == 2
    assert Q.exit_rate(1) == 2.0


def test_row_sum_rejected():
    with pytest.raises(RowSumNonzero):
        validate_generator([[-1.0, 0.5], [2.0, -2.0]])


def test_negative_off_diagonal_rejected():
    with pytest.raises(NegativeOffDiagonal):
        validate_generator([[-1.0, 1.0], [-2.0, 2.0]])


def test_rate_bound_rejected():
    with pytest.raises(RateBoundExceeded):
        validate_generator(Q2, rate_bound=1.5)


def test_regime_index_checked():
    with pytest.raises(RegimeOutOfRange):
        validate_generator(Q2).check_regime(2)


def test_stationary_distribution():
    assert np.allclose(stationary_distribution(validate_generator(Q2)), [2 / 3, 1 / 3], atol=1e-14)


def test_absorbing_chain_never_jumps():
    Q = validate_generator([[0.0, 0.0], [0.0, 0.0]])
    p = sample_path(Q, 1, 10.0, stream(0, "t"))
    assert p.n_jumps == 0
    assert p.state_at(7.3) == 1


def test_long_run_fraction():
    Q = validate_generator(Q2)
    p = sample_path(Q, 0, 5000.0, stream(1, "long"))
    assert abs(occupation_times(p, 2)[0] / 5000.0 - 2 / 3) <= 0.02


def test_first_holding_time_mean():
    Q = validate_generator(Q2)
    first = []
    for k in range(100_000):
        p = sample_path(Q, 0, 50.0, stream(2, "hold", k))
        first.append(p.jump_times[0])
    assert abs(np.mean(first) - 1.0) <= 0.01


@given(st.integers(0, 10_000))
def test_path_invariants(k):
    Q = validate_generator(Q2)
    p = sample_path(Q, 0, 3.0, stream(3, "inv", k))
    assert np.all(np.diff(p.jump_times) > 0)
    for t, s in zip(p.jump_times, p.states):
        assert p.state_at(t) == s
        assert p.state_before(t) != s
    assert math.isclose(occupation_times(p, 2).sum(), 3.0, rel_tol=0, abs_tol=1e-12)


def test_cadlag_single_jump():
    p = RegimePath(0, np.array([0.5]), np.array([1]), 1.0)
    assert p.state_at(0.5) == 1
    assert p.state_before(0.5) == 0


def test_ledger_single_jump():
    Q = validate_generator([[-1.0, 1.0], [1.0, -1.0]])
    p = RegimePath(0, np.array([0.5]), np.array([1]), 1.0)
    led = martingale_ledger(p, Q, [1.0])
    assert led.bracket[0, 1, -1] == 1.0
    assert led.compensator[0, 1, -1] == pytest.approx(0.5)
    assert led.martingale[0, 1, -1] == pytest.approx(0.5)


def test_ledger_no_jumps():
    Q = validate_generator([[-2.0, 2.0], [1.0, -1.0]])
    p = RegimePath(0, np.array([]), np.array([], dtype=int), 1.0)
    led = martingale_ledger(p, Q, [1.0])
    assert led.bracket[0, 1, -1] == 0.0
    assert led.compensator[0, 1, -1] == pytest.approx(2.0)
    assert led.martingale[0, 1, -1] == pytest.approx(-2.0)


@given(st.integers(0, 10_000))
def test_ledger_diagonal_and_monotone(k):
    Q = validate_generator(Q2)
    p = sample_path(Q, 0, 2.0, stream(4, "led", k))
    grid = np.linspace(0, 2.0, 41)
    led = martingale_ledger(p, Q, grid)
    for i in range(2):
        assert np.all(led.martingale[i, i] == 0.0)
        assert np.all(led.bracket[i, i] == 0.0)
    assert np.all(np.diff(led.bracket, axis=-1) >= 0)
    assert np.all(np.diff(led.compensator, axis=-1) >= -1e-15)
    assert np.array_equal(led.bracket, np.round(led.bracket))


def test_ledger_against_riemann_sum():
    Q = validate_generator(Q2)
    p = sample_path(Q, 0, 2.0, stream(5, "riemann"))
    led = martingale_ledger(p, Q, [2.0])
    h = 1e-5
    ts = np.arange(0.0, 2.0, h) + h / 2
    occ0 = np.sum(p.state_at(ts) == 0) * h
    assert abs(led.compensator[0, 1, -1] - occ0 * 1.0) <= 1e-4


def test_ledger_grid_checked():
    Q = validate_generator(Q2)
    p = sample_path(Q, 0, 1.0, stream(6, "g"))
    with pytest.raises(GridOutOfRange):
        martingale_ledger(p, Q, [0.0, 2.0])


def test_occupation_examples():
    none = RegimePath(0, np.array([]), np.array([], dtype=int), 3.0)
    assert np.allclose(occupation_times(none, 2), [3.0, 0.0])
    one = RegimePath(0, np.array([1.0]), np.array([1]), 3.0)
    assert np.allclose(occupation_times(one, 2), [1.0, 2.0])


def test_small_dt_transition_frequencies():
    Q = validate_generator(Q2)
    dt = 0.01
    paths = sample_paths(Q, 0, dt, 7, 20_000, tag="trans")
    moved = np.mean([p.state_at(dt) == 1 for p in paths])
    se = math.sqrt(dt * (1 - dt) / 20_000)
    assert abs(moved - dt) <= 3 * se + dt**2


def test_ledger_csv(tmp_path):
    Q = validate_generator(Q2)
    p = sample_path(Q, 0, 1.0, stream(8, "csv"))
    write_ledger_csv(martingale_ledger(p, Q, np.linspace(0, 1, 5)), tmp_path / "l.csv")
    lines = (tmp_path / "l.csv").read_text().splitlines()
    assert lines[0] == "t,pair,bracket,compensator,martingale"
    assert len(lines) == 1 + 5 * 2
