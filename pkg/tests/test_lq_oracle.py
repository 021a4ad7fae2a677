import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rmfg.game_model import LqParams, catalog_spec
from rmfg.lq_oracle import (
    decoupling_field_lq,
    discrete_limit_law,
    mean_flow_lq,
    riccati_residual,
    solve_riccati,
    write_riccati_csv,
)
from rmfg.regime_chain import RegimePath, sample_path, validate_generator
from rmfg.rng import stream

GRID = np.linspace(0.0, 1.0, 201)
SINGLE = validate_generator([[0.0]])


def test_stationary_flow():
    sol = solve_riccati(LqParams.build(), SINGLE, GRID)
    assert np.max(np.abs(sol.K - 1.0)) <= 1e-8
    assert np.max(np.abs(sol.L)) <= 1e-12


def test_symmetric_regimes():
    Q = validate_generator([[-1.0, 1.0], [1.0, -1.0]])
    sol = solve_riccati(LqParams.build(2, Qx=2.0, s=0.4, sg=0.4, c=0.2, b1=-0.1), Q, GRID)
    assert np.array_equal(sol.K[:, 0], sol.K[:, 1])
    p0 = decoupling_field_lq(sol, 0.3, np.array([1.2]), np.array([0.4]), 0)
    p1 = decoupling_field_lq(sol, 0.3, np.array([1.2]), np.array([0.4]), 1)
    assert np.array_equal(p0, p1)


def test_no_state_cost_closed_form():
    sol = solve_riccati(LqParams.build(Qx=0.0), SINGLE, GRID)
    exact = 1.0 / (1.0 + (1.0 - GRID))
    assert np.max(np.abs(sol.K[:, 0, 0, 0] - exact)) <= 1e-8
    assert decoupling_field_lq(sol, 0.0, np.array([1.0]), np.array([0.0]), 0)[0] == pytest.approx(0.5, abs=1e-8)


def test_field_linear_example():
    sol = solve_riccati(LqParams.build(), SINGLE, GRID)
    assert decoupling_field_lq(sol, 0.5, np.array([2.0]), np.array([0.0]), 0)[0] == pytest.approx(2.0, abs=1e-8)


@given(st.floats(0.0, 1.0))
def test_interpolation_accuracy(t):
    sol = solve_riccati(LqParams.build(Qx=0.0), SINGLE, GRID)
    K = sol.coefficients(t)[0][0, 0, 0]
    assert K == pytest.approx(1.0 / (2.0 - t), abs=1e-8)


def test_residual_small():
    spec = catalog_spec("lq-mean-drift")
    sol = solve_riccati(spec.lq, spec.regimes, GRID)
    assert riccati_residual(sol) <= 1e-6
    K = sol.K
    assert np.all(np.linalg.eigvalsh(K) > 0)


def test_coarse_grid_rejected():
    with pytest.raises(ValueError):
        solve_riccati(LqParams.build(), SINGLE, np.linspace(0, 1, 11))


def test_zero_start_mean():
    sol = solve_riccati(LqParams.build(), SINGLE, GRID)
    path = RegimePath(0, np.array([]), np.array([], dtype=int), 1.0)
    flow = mean_flow_lq(sol, sol.params, SINGLE, path, [0.0])
    assert np.max(np.abs(flow.mean)) == 0.0


def test_exponential_mean():
    sol = solve_riccati(LqParams.build(), SINGLE, GRID)
    path = RegimePath(0, np.array([]), np.array([], dtype=int), 1.0)
    flow = mean_flow_lq(sol, sol.params, SINGLE, path, [1.0])
    assert np.max(np.abs(flow.mean[:, 0] - np.exp(-flow.times))) <= 1e-9
    # variance of dX = -X dt + dW from a point mass
    assert np.max(np.abs(flow.cov[:, 0, 0] - 0.5 * (1 - np.exp(-2 * flow.times)))) <= 1e-9


def test_switched_mean_against_particles():
    spec = catalog_spec("lq-mean-drift")
    sol = solve_riccati(spec.lq, spec.regimes, GRID)
    path = sample_path(spec.regimes, 0, 1.0, stream(11, "mf-path"))
    flow = mean_flow_lq(sol, spec.lq, spec.regimes, path, spec.x0)
    # particle oracle: Euler with the equilibrium feedback and the exact mean plugged in
    P, n = 100_000, 1000
    dt = 1.0 / n
    rng = stream(11, "mf-particles")
    x = np.full(P, spec.x0[0])
    S = spec.lq.control_gain()
    for k in range(n):
        t = k * dt
        i = path.state_at(t)
        K, L, kk, _ = sol.coefficients(t)
        m = flow.at(t)[0]
        a = -(K[i, 0, 0] * x + L[i, 0, 0] * m + kk[i, 0])
        drift = spec.lq.b1[i, 0, 0] * x + spec.lq.c[i, 0, 0] * m + S[i, 0, 0] * a
        x = x + drift * dt + spec.lq.sigma[i, 0, 0] * math.sqrt(dt) * rng.standard_normal(P)
    se = x.std(ddof=1) / math.sqrt(P)
    assert abs(x.mean() - flow.mean[-1, 0]) <= 3 * se + 2 * dt


@settings(max_examples=20)
@given(st.lists(st.integers(0, 1), min_size=8, max_size=8))
def test_discrete_law_batched_matches_single(regs):
    spec = catalog_spec("lq-mean-drift")
    sol = solve_riccati(spec.lq, spec.regimes, GRID)
    regs = np.array(regs)
    m1, v1 = discrete_limit_law(sol, spec.lq, regs, spec.x0, 0.125)
    mb, vb = discrete_limit_law(sol, spec.lq, np.stack([regs, 1 - regs], axis=1), spec.x0, 0.125)
    assert np.allclose(mb[:, 0], m1, atol=1e-14)
    assert np.allclose(vb[:, 0], v1, atol=1e-14)
    assert np.all(vb[..., 0, 0] >= 0)


def test_discrete_law_converges_to_flow():
    sol = solve_riccati(LqParams.build(), SINGLE, GRID)
    path = RegimePath(0, np.array([]), np.array([], dtype=int), 1.0)
    flow = mean_flow_lq(sol, sol.params, SINGLE, path, [1.0])
    errs = []
    for n in (50, 100, 200):
        m, _ = discrete_limit_law(sol, sol.params, np.zeros(n, dtype=int), [1.0], 1.0 / n)
        errs.append(abs(m[-1, 0] - flow.mean[-1, 0]))
    assert errs[1] < errs[0] and errs[2] < errs[1]
    assert errs[1] / errs[2] == pytest.approx(2.0, rel=0.1)


def test_riccati_csv(tmp_path):
    sol = solve_riccati(LqParams.build(), SINGLE, GRID)
    write_riccati_csv(sol, tmp_path / "r.csv")
    rows = (tmp_path / "r.csv").read_text().splitlines()
    assert rows[0].startswith("t,regime,K00")
    assert len(rows) == 1 + len(GRID)
