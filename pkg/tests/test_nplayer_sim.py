import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rmfg.fbsde_solver import FbsdeBudget, solve
from rmfg.game_model import catalog_spec
from rmfg.nplayer_sim import (
    CostEstimate,
    Deviation,
    FieldDomainExceeded,
    FieldStrategy,
    OracleStrategy,
    calibrate_time_steps,
    default_deviation_family,
    draw_noise,
    estimate_cost,
    nash_gap,
    run_system,
    simulate,
    write_gap_csv,
    write_runs_csv,
)


def test_zero_costs():
    spec = catalog_spec("lq-mean-drift", Qx=0.0, G=0.0)
    run = simulate(spec, 4, OracleStrategy(spec), reps=40, n_t=20, seed=1)[0]
    assert np.all(run.costs == 0.0)


def test_unit_running_cost_integrates_to_horizon():
    base = catalog_spec("lq", horizon=2.0)
    spec = base.with_(f=lambda t, x, mu, a, i: np.ones(np.shape(x)[:-1]),
                      g=lambda x, mu, i: np.zeros(np.shape(x)[:-1]))
    run = simulate(spec, 3, OracleStrategy(base), reps=30, n_t=25, seed=2)[0]
    assert np.allclose(run.costs, 2.0, rtol=0, atol=1e-12)


def test_brownian_second_moment():
    spec = catalog_spec("lq", b2=0.0, Qx=0.0, G=2.0, x0=[0.0])
    run = simulate(spec, 2, OracleStrategy(spec), reps=4000, n_t=10, seed=3)[0]
    c = estimate_cost(spec, run)
    assert abs(c.estimate - 1.0) <= 3 * c.stderr


def test_empirical_mean_tracks_limit_mean():
    spec = catalog_spec("lq-mean-drift")
    run = simulate(spec, 64, OracleStrategy(spec), reps=400, n_t=32, seed=4)[0]
    diff = run.emp_mean[:, :, 0] - run.limit_mean[:, :, 0]
    z = diff.mean(axis=0)[1:] / (diff.std(axis=0, ddof=1)[1:] / math.sqrt(run.reps))
    assert abs(z[-1]) <= 3.0
    assert np.mean(np.abs(z) <= 3.0) >= 0.9


@settings(max_examples=15)
@given(st.permutations(list(range(5))), st.integers(0, 1000))
def test_player_permutation_permutes_outcomes(perm, seed):
    spec = catalog_spec("lq-mean-drift")
    src = OracleStrategy(spec)
    paths, dW = draw_noise(spec, 5, 3, 12, seed)
    a = run_system(spec, src, paths, dW, keep_paths=True)[0]
    b = run_system(spec, src, paths, dW[:, :, perm], keep_paths=True)[0]
    assert np.array_equal(b.costs, a.costs[:, perm])
    assert np.array_equal(b.X, a.X[:, :, perm])
    assert np.array_equal(b.emp_mean, a.emp_mean)


def test_identity_arm_is_bitwise_baseline():
    spec = catalog_spec("lq-mean-drift")
    runs = simulate(spec, 4, OracleStrategy(spec), reps=40, n_t=16, seed=5,
                    arms=[None, Deviation("identity")])
    assert np.array_equal(runs[0].costs, runs[1].costs)
    rep = nash_gap(spec, [4], OracleStrategy(spec), [Deviation("identity")], reps=40, n_t=16, seed=5)
    assert rep.rows[0].gap == 0.0


def test_chunking_does_not_change_results():
    spec = catalog_spec("lq-mean-drift")
    a = simulate(spec, 3, OracleStrategy(spec), reps=50, n_t=10, seed=6)[0]
    b = simulate(spec, 3, OracleStrategy(spec), reps=50, n_t=10, seed=6, chunk=7)[0]
    assert np.array_equal(a.costs, b.costs)
    assert np.array_equal(a.emp_mean, b.emp_mean)


def test_infinite_mode_gap_within_noise():
    spec = catalog_spec("lq-mean-drift")
    rep = nash_gap(spec, [2], OracleStrategy(spec), reps=400, n_t=32, seed=7, infinite=True)
    row = rep.rows[0]
    for est in row.diffs.values():
        assert est.estimate <= 2 * est.stderr


def test_gap_report_and_csv(tmp_path):
    spec = catalog_spec("lq-mean-drift")
    rep = nash_gap(spec, [4, 8], OracleStrategy(spec), reps=60, n_t=16, seed=8)
    assert [r.N for r in rep.rows] == [4, 8]
    assert rep.rows[0].eps_N == pytest.approx(4 ** -0.25)
    assert rep.rows[0].gap_clamped >= 0.0
    write_gap_csv(rep, tmp_path / "g.csv")
    lines = (tmp_path / "g.csv").read_text().splitlines()
    assert lines[0].startswith("# nash gap infinite=False")
    assert sum(1 for ln in lines if ",best:" in ln) == 2


def test_runs_csv(tmp_path):
    spec = catalog_spec("lq")
    runs = simulate(spec, 2, OracleStrategy(spec), reps=30, n_t=8, seed=9, arms=[None, Deviation("scale", 0.5)])
    write_runs_csv(spec, runs, tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "N,arm,reps,n_t,cost,stderr,alpha_sq,sup_x_sq"
    assert lines[2].split(",")[1] == "scale=0.5"


def test_deviation_names_and_validation():
    assert Deviation("shift", 0.1).name == "shift[0]=+0.1"
    assert Deviation("frozen-flow").name == "frozen-flow"
    with pytest.raises(ValueError):
        Deviation("teleport")
    names = [d.name for d in default_deviation_family(catalog_spec("lq"))]
    assert len(set(names)) == len(names)


def test_cost_estimate_needs_enough_reps():
    with pytest.raises(ValueError):
        CostEstimate.from_values(np.ones(10))
    c = CostEstimate.from_values(np.arange(40.0))
    lo, hi = c.ci()
    assert lo < c.estimate < hi


def test_single_player_rejected():
    spec = catalog_spec("lq")
    with pytest.raises(ValueError):
        simulate(spec, 1, OracleStrategy(spec), reps=30, n_t=8, seed=0)


def test_calibration_stops_when_bias_is_below_noise():
    spec = catalog_spec("lq-mean-drift")
    n, hist = calibrate_time_steps(spec, OracleStrategy(spec), 8, 200, seed=10, start=8, max_doublings=3)
    last = hist[-1]
    assert last[0] == n
    assert abs(last[1]) <= last[2] / 2 or len(hist) == 4


def test_field_strategy_warns_outside_box():
    spec = catalog_spec("lq")
    field, ens, _ = solve(spec, FbsdeBudget(blocks=16, particles=256, n_steps=32, probes=32), seed=1)
    src = FieldStrategy(spec, field, ens, box=(np.array([-0.1]), np.array([0.1])))
    with pytest.warns(FieldDomainExceeded):
        p = src.feedback(0.5, np.array([[2.0]]), np.array([0.5]), 0)
    # the field is p = x, so linear extrapolation is exact
    assert p[0, 0] == pytest.approx(2.0, abs=1e-2)


def test_field_strategy_agrees_with_oracle():
    spec = catalog_spec("lq")
    field, ens, _ = solve(spec, FbsdeBudget(blocks=16, particles=256, n_steps=32, probes=64), seed=1)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", FieldDomainExceeded)
        a = simulate(spec, 8, FieldStrategy(spec, field, ens), reps=60, n_t=32, seed=11)[0]
    b = simulate(spec, 8, OracleStrategy(spec), reps=60, n_t=32, seed=11)[0]
    assert np.max(np.abs(a.costs - b.costs)) <= 1e-2 * (1 + np.max(np.abs(b.costs)))
