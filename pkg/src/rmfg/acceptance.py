"""Exit-criteria checks, shared by the test suite and the ``full-lq-acceptance`` pipeline.

Each ``criterion_k`` returns a :class:`CriterionResult` holding the numeric
metrics, a verdict on those metrics, and the wall-clock time against its
limit. Metrics are deterministic given the seed; timings are not, so they
are kept apart from the numeric verdict.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import analysis, fbsde_solver, lq_oracle, nash_pde, nplayer_sim
from .game_model import CATALOG, MeasureArg, catalog_spec
from .hamiltonian import growth_bound, hamiltonian_value, minimize
from .regime_chain import martingale_ledger, occupation_times, sample_paths, stationary_distribution, validate_generator
from .rng import stream

__all__ = ["CriterionResult", "CRITERIA", "run_criterion", "criterion_1", "criterion_2", "criterion_3",
           "criterion_4", "criterion_5", "criterion_6", "criterion_8", "hungarian_w2"]


@dataclass
class CriterionResult:
    number: int
    title: str
    numeric_pass: bool
    metrics: dict
    seconds: float = float("nan")
    limit_seconds: float = float("inf")
    artifacts: dict = field(default_factory=dict)

    @property
    def in_time(self) -> bool:
        return self.seconds <= self.limit_seconds

    @property
    def passed(self) -> bool:
        return self.numeric_pass and self.in_time

    def line(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        keys = ", ".join(f"{k}={_fmt(v)}" for k, v in self.metrics.items())
        return (f"criterion {self.number} [{verdict}] {self.title}: {keys}; "
                f"runtime {self.seconds:.1f}s (limit {self.limit_seconds:.0f}s)")


def _fmt(v):
    if isinstance(v, bool):
        return str(v)
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.4g}"
    return str(v)


# --------------------------------------------------------------------------- 1: minimiser suite


def criterion_1(seed: int = 0, points: int = 10_000) -> CriterionResult:
    """Optimality, first-order condition, growth bound and Lipschitz-in-p on random points."""
    names = sorted(CATALOG)
    per = -(-points // len(names))
    worst = {"optimality": -np.inf, "first_order": 0.0, "growth": -np.inf, "lipschitz": -np.inf}
    total = 0
    for k, name in enumerate(names):
        spec = catalog_spec(name)
        rng = stream(seed, "accept-hamiltonian", k)
        d, m = spec.dim_state, spec.dim_control
        b2n = max(np.linalg.norm(np.atleast_2d(spec.b2(0.0, i)), 2) for i in range(spec.n_regimes))
        for i in range(spec.n_regimes):
            n = per // spec.n_regimes + (1 if i < per % spec.n_regimes else 0)
            t = float(rng.uniform(0, spec.horizon))
            x = rng.normal(0, 2, (n, d))
            mu = MeasureArg.moments(rng.normal(0, 1, (n, d)))
            p = rng.normal(0, 3, (n, d))
            dp = rng.normal(0, 1, (n, d))
            res = minimize(spec, t, x, mu, p, i)
            a = res.alpha_hat
            h0 = hamiltonian_value(spec, t, x, mu, a, p, None, i)
            for scale in (1e-3, 1e-1, 1.0):
                trial = a + scale * rng.normal(0, 1, (n, m))
                ht = hamiltonian_value(spec, t, x, mu, trial, p, None, i)
                worst["optimality"] = max(worst["optimality"], float(np.max((h0 - ht) / (1 + np.abs(h0)))))
            worst["first_order"] = max(worst["first_order"], float(res.gradient_norm_at_opt.max()))
            gb = growth_bound(spec, t, x, mu, p, i)
            worst["growth"] = max(worst["growth"], float(np.max(np.linalg.norm(a, axis=-1) - gb)))
            a2 = minimize(spec, t, x, mu, p + dp, i).alpha_hat
            ratio = np.linalg.norm(a2 - a, axis=-1) / (b2n / spec.lam * np.linalg.norm(dp, axis=-1))
            worst["lipschitz"] = max(worst["lipschitz"], float(ratio.max()))
            total += n
    ok = (worst["optimality"] <= 1e-12 and worst["first_order"] <= 1e-8
          and worst["growth"] <= 1e-12 and worst["lipschitz"] <= 1 + 1e-9)
    metrics = {"points": total, "max_h_excess": worst["optimality"], "max_grad_norm": worst["first_order"],
               "max_growth_excess": worst["growth"], "max_lipschitz_ratio": worst["lipschitz"]}
    return CriterionResult(1, "Hamiltonian minimiser suite", ok, metrics, limit_seconds=10)


# --------------------------------------------------------------------------- 2: regime chain


def criterion_2(seed: int = 0, n_paths: int = 10_000) -> CriterionResult:
    Q = validate_generator([[-1.0, 1.0], [2.0, -2.0]])
    T = 2.0
    grid = np.linspace(0.0, T, 9)
    paths = sample_paths(Q, 0, T, seed, n_paths, tag="accept-chain")
    mart = np.stack([martingale_ledger(p, Q, grid).martingale for p in paths])  # (n, i, j, k)
    mean = mart.mean(axis=0)
    se = mart.std(axis=0, ddof=1) / math.sqrt(n_paths)
    off = ~np.eye(Q.states, dtype=bool)
    z = np.abs(mean[off][:, 1:]) / se[off][:, 1:]
    T_long = 20.0
    long_paths = sample_paths(Q, 0, T_long, seed, n_paths, tag="accept-chain-long")
    frac = float(np.mean([occupation_times(p, 2)[0] / T_long for p in long_paths]))
    pi0 = float(stationary_distribution(Q)[0])
    ok = bool(np.all(z <= 3.0)) and abs(frac - 2 / 3) <= 0.02
    metrics = {"paths": n_paths, "max_martingale_z": float(z.max()), "occupation_fraction": frac,
               "stationary_pi0": pi0}
    return CriterionResult(2, "regime-chain suite", ok, metrics, limit_seconds=30)


# --------------------------------------------------------------------------- 3: FBSDE vs Riccati


def fbsde_oracle_error(spec, field, ens, sol, times=None) -> float:
    """``max |u_fbsde - u_riccati| / (1 + |x|)`` on ``x in [-2, 2]``, over realised block means."""
    times = [0.0, spec.horizon / 2] if times is None else times
    xs = np.linspace(-2.0, 2.0, 41)[:, None]
    worst = 0.0
    for t in times:
        n = int(round(t / (ens.grid[1] - ens.grid[0])))
        for i in range(spec.n_regimes):
            sel = ens.node_regimes[n] == i
            means = ens.block_mean[n][sel] if sel.any() else ens.block_mean[n]
            for m in np.unique(means, axis=0):
                uf = fbsde_solver.evaluate_field(field, t, xs, m, i)
                ur = lq_oracle.decoupling_field_lq(sol, t, xs, m, i)
                worst = max(worst, float(np.max(np.abs(uf - ur) / (1 + np.abs(xs)))))
    return worst


def criterion_3(seed: int = 0, budget: fbsde_solver.FbsdeBudget | None = None) -> CriterionResult:
    budget = fbsde_solver.FbsdeBudget() if budget is None else budget
    metrics, arts = {}, {}
    ok = True
    for name in ("lq", "lq-mean-drift"):
        spec = catalog_spec(name)
        sol = lq_oracle.solve_riccati(spec.lq, spec.regimes, np.linspace(0, spec.horizon, 401))
        field_, ens, rep = fbsde_solver.solve(spec, budget, seed)
        err = fbsde_oracle_error(spec, field_, ens, sol)
        metrics[f"{name}:err"] = err
        metrics[f"{name}:picard"] = rep.iterations
        ok &= err <= 1e-2
        arts[name] = (field_, rep)
    stat = catalog_spec("lq")
    sol = lq_oracle.solve_riccati(stat.lq, stat.regimes, np.linspace(0, stat.horizon, 401))
    kerr = float(np.max(np.abs(sol.K - 1.0)))
    metrics["K_stationary_err"] = kerr
    ok &= kerr <= 1e-8
    return CriterionResult(3, "LQ cross-oracle", bool(ok), metrics, limit_seconds=300, artifacts=arts)


# --------------------------------------------------------------------------- 4: Nash PDE


def _riccati_value(sol, x, t_index):
    """Uncoupled LQ value ``x'Kx/2 + c0`` on a 1-D grid for every regime."""
    K, c0 = sol.K[t_index][:, 0, 0], sol.c0[t_index]
    return 0.5 * K[:, None] * x[None] ** 2 + c0[:, None]


def criterion_4(n_x: int = 201, n_t: int = 400) -> CriterionResult:
    metrics = {}
    params = nash_pde.GridParams(n_x=n_x, n_t=n_t)
    ok = True
    # N = 1 against Riccati: the unit problem and the one with no running state cost
    for label, spec in (("unit", catalog_spec("lq")), ("qx0", catalog_spec("lq", Qx=0.0))):
        vg = nash_pde.solve_nash_system(spec, 1, params)
        refine = max(1, -(-200 // (len(vg.times) - 1)))
        sol = lq_oracle.solve_riccati(spec.lq, spec.regimes,
                                      np.linspace(0.0, spec.horizon, refine * (len(vg.times) - 1) + 1))
        mask = vg.inner_mask()
        err = 0.0
        for kk, n in enumerate(vg.time_index):
            ref = _riccati_value(sol, vg.x, refine * n)
            err = max(err, float(np.max(np.abs(vg.values[kk, 0][:, mask] - ref[:, mask]))))
        metrics[f"N1_{label}_err"] = err
        ok &= err <= 1e-2
    # terminal condition and refinement on the regime-switching spec
    spec = catalog_spec("lq-mean-drift")
    coarse = nash_pde.solve_nash_system(spec, 1, nash_pde.GridParams(n_x=(n_x + 1) // 2, n_t=n_t // 2))
    fine = nash_pde.solve_nash_system(spec, 1, params)
    xs = nash_pde._state_grids(fine.x, 1)
    mu = nash_pde._others_measure(xs, 0)
    term = max(float(np.max(np.abs(fine.slice_at(n_t)[0, i] - spec.g(xs[0], mu, i)))) for i in range(2))
    metrics["terminal_err"] = term
    ok &= term == 0.0
    r_c, r_f = nash_pde.pde_residual(coarse, spec), nash_pde.pde_residual(fine, spec)
    metrics["residual_ratio"] = r_c / r_f
    ok &= r_c / r_f >= 1.7
    # two identical regimes reproduce each other
    sym = catalog_spec("lq-mean-drift", generator=[[-1.0, 1.0], [1.0, -1.0]], Qx=1.0, s=0.5, G=1.0, sg=0.5,
                       b1=0.0, c=0.3, sigma=0.8)
    vs = nash_pde.solve_nash_system(sym, 1, params)
    metrics["regime_symmetry"] = float(np.max(np.abs(vs.values[:, :, 0] - vs.values[:, :, 1])))
    ok &= metrics["regime_symmetry"] <= 1e-10
    # two players: exchange symmetry of values and feedbacks
    v2 = nash_pde.solve_nash_system(spec, 2, params)
    V = v2.slice_at(0)
    metrics["exchange_value"] = float(np.max(np.abs(V[0] - np.swapaxes(V[1], -1, -2))))
    fb = nash_pde.feedback_from_values(v2, spec).alpha[0]
    metrics["exchange_alpha"] = float(np.max(np.abs(fb[0][..., 0] - np.swapaxes(fb[1][..., 0], -1, -2))))
    ok &= metrics["exchange_value"] <= 1e-8 and metrics["exchange_alpha"] <= 1e-8
    return CriterionResult(4, "Nash-PDE suite", bool(ok), metrics, limit_seconds=120)


# --------------------------------------------------------------------------- 5: chaos


def criterion_5(seed: int = 0, reps: int = 200, N_list=(8, 16, 32, 64, 128), n_t: int = 64) -> CriterionResult:
    spec = catalog_spec("lq-mean-drift")
    table = analysis.chaos_sweep(spec, nplayer_sim.OracleStrategy(spec), N_list, reps, n_t, seed)
    lo, hi = table.slope_ci()
    ok = -0.8 <= table.slope <= -0.3 and table.monotone_within_ci()
    metrics = {"slope": table.slope, "slope_ci_lo": lo, "slope_ci_hi": hi,
               "monotone": table.monotone_within_ci()}
    return CriterionResult(5, "propagation of chaos", bool(ok), metrics, limit_seconds=600,
                           artifacts={"table": table})


# --------------------------------------------------------------------------- 6: Nash gap


def criterion_6(seed: int = 0, reps: int = 2000, n_t: int = 64, N_sweep=(8, 16, 32, 64)) -> CriterionResult:
    spec = catalog_spec("lq-mean-drift")
    src = nplayer_sim.OracleStrategy(spec)
    inf = nplayer_sim.nash_gap(spec, [2], src, reps=reps, n_t=n_t, seed=seed, infinite=True)
    inf_row = inf.rows[0]
    inf_ok = all(e.estimate <= 2 * e.stderr for e in inf_row.diffs.values())
    rep = nplayer_sim.nash_gap(spec, list(N_sweep), src, reps=reps, n_t=n_t, seed=seed)
    last = rep.rows[-1]
    bound = 3 * last.eps_N * rep.fitted_constant
    ok = inf_ok and rep.non_increasing_within_ci() and last.gap_clamped <= bound
    metrics = {"inf_max_diff_over_se": max(e.estimate / e.stderr if e.stderr > 0 else (0.0 if e.estimate <= 0 else
                                                                                           math.inf)
                                           for e in inf_row.diffs.values()),
               "non_increasing": rep.non_increasing_within_ci(), "fitted_c": rep.fitted_constant}
    for row in rep.rows:
        metrics[f"gap_N{row.N}"] = row.gap_clamped
    metrics["bound_last"] = bound
    return CriterionResult(6, "epsilon-Nash gap", bool(ok), metrics, limit_seconds=900,
                           artifacts={"finite": rep, "infinite": inf})


# --------------------------------------------------------------------------- 8: metric oracle


def hungarian_w2(a, b) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    cost = (a[:, None] - b[None, :]) ** 2
    r, c = linear_sum_assignment(cost)
    return math.sqrt(cost[r, c].sum() / len(a))


def criterion_8(seed: int = 0, instances: int = 1000) -> CriterionResult:
    rng = stream(seed, "accept-w2")
    worst = 0.0
    for _ in range(instances):
        n = int(rng.integers(1, 7))
        a, b = rng.normal(0, 1, n), rng.normal(0, 1, n)
        worst = max(worst, abs(analysis.wasserstein2_1d(a, b) - hungarian_w2(a, b)))
    return CriterionResult(8, "W2 metric oracle", worst <= 1e-12, {"instances": instances, "max_abs_diff": worst},
                           limit_seconds=5)


CRITERIA = {1: criterion_1, 2: criterion_2, 3: criterion_3, 4: criterion_4, 5: criterion_5, 6: criterion_6,
            8: criterion_8}


def run_criterion(k: int, **kwargs) -> CriterionResult:
    t0 = time.perf_counter()
    res = CRITERIA[k](**kwargs)
    res.seconds = time.perf_counter() - t0
    return res
