"""N-player simulation under the limiting feedback, cost estimation and epsilon-Nash gaps.

Every player uses ``alpha_hat(t, X^i, law, u(t, X^i, law mean, I), I)`` where
``law`` is the limit conditional law along the realised regime path, while
drift, diffusion and costs see the empirical measure of the N players.

All arms of an experiment (the baseline and every deviation of player 0)
share regime paths and Brownian increments, so cost differences are
estimated with common random numbers. Replication ``r`` draws its regime
path and noise from streams indexed by ``r`` alone.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .analysis import epsilon_rate
from .fbsde_solver import DecouplingField, ParticleEnsemble
from .game_model import GameSpec, MeasureArg
from .hamiltonian import alpha_hat
from .lq_oracle import RiccatiSolution, decoupling_field_lq, discrete_limit_law, solve_riccati
from .regime_chain import RegimePath, sample_path
from .rng import stream

__all__ = [
    "FieldDomainExceeded",
    "Deviation",
    "default_deviation_family",
    "OracleStrategy",
    "FieldStrategy",
    "SimulationRun",
    "CostEstimate",
    "NashGapRow",
    "NashGapReport",
    "draw_noise",
    "run_system",
    "simulate",
    "estimate_cost",
    "nash_gap",
    "calibrate_time_steps",
    "write_runs_csv",
    "write_gap_csv",
]

MIN_REPS = 30


class FieldDomainExceeded(UserWarning):
    """A particle left the x-range on which the fitted field was trained."""


# --------------------------------------------------------------------------- strategies


def _occupation_curve(path: RegimePath, times: np.ndarray, s0: int) -> np.ndarray:
    out = np.zeros((len(times), s0))
    for a, b, s in path.segments():
        out[:, s] += np.clip(times - a, 0.0, b - a)
    return out


class OracleStrategy:
    """Riccati feedback for LQ specs, with the exact Euler-consistent limit law."""

    def __init__(self, spec: GameSpec, sol: RiccatiSolution | None = None, n_grid: int = 400):
        if spec.lq is None:
            raise ValueError("the Riccati oracle needs an LQ spec")
        self.spec = spec
        if sol is None:
            sol = solve_riccati(spec.lq, spec.regimes, np.linspace(0.0, spec.horizon, n_grid + 1))
        self.sol = sol

    def feedback(self, t, x, m, i):
        return decoupling_field_lq(self.sol, t, x, m, i)

    def limit_law(self, paths, grid, node_regimes):
        """Mean ``(R, n+1, d)`` and second moment ``(R, n+1)`` of the limit law per path."""
        dt = grid[1] - grid[0]
        means, covs = discrete_limit_law(self.sol, self.spec.lq, node_regimes[:, :-1].T, self.spec.x0, dt)
        means = np.swapaxes(means, 0, 1)
        m2 = np.sum(means**2, axis=-1) + np.trace(np.swapaxes(covs, 0, 1), axis1=-2, axis2=-1)
        return means, m2


class FieldStrategy:
    """Fitted decoupling field plus the solving ensemble's block laws.

    The law along a simulated regime path is the law of the ensemble block
    whose occupation-time vector is nearest at each time, preferring blocks
    in the same current regime. Without an ensemble the law is the point
    mass at ``x0``, which suits only fields that ignore the law.
    """

    def __init__(self, spec: GameSpec, field: DecouplingField, ensemble: ParticleEnsemble | None = None,
                 box: tuple | None = None):
        self.spec = spec
        self.field = field
        self.ensemble = ensemble
        if box is None and ensemble is not None:
            pts = ensemble.X.reshape(-1, spec.dim_state)
            box = (pts.min(axis=0), pts.max(axis=0))
        self.box = None if box is None else (np.asarray(box[0], float), np.asarray(box[1], float))

    def _node_eval(self, n, x, m, i, jac):
        fit = self.field.fits[n][i]
        v = fit.value(x, m)
        return (v, fit.jacobian(x, m)[0]) if jac else (v, None)

    def feedback(self, t, x, m, i):
        g = self.field.grid
        n = int(np.clip(np.searchsorted(g, t, side="right") - 1, 0, len(g) - 2))
        w = min(max((t - g[n]) / (g[n + 1] - g[n]), 0.0), 1.0)
        x = np.asarray(x, dtype=float)
        xc = x
        outside = False
        if self.box is not None:
            xc = np.clip(x, self.box[0], self.box[1])
            outside = bool(np.any(xc != x))
            if outside:
                warnings.warn(FieldDomainExceeded(
                    f"t={t:.4g}: {int(np.sum(np.any(xc != x, axis=-1)))} particle(s) outside the "
                    f"trusted range; extrapolating linearly"), stacklevel=2)
        out = 0.0
        for node, wt in ((n, 1.0 - w), (n + 1, w)):
            if wt == 0.0:
                continue
            v, jx = self._node_eval(node, xc, m, i, outside)
            if outside:
                v = v + np.einsum("...ij,...j->...i", jx, x - xc)
            out = out + wt * v
        return out

    def limit_law(self, paths, grid, node_regimes):
        R, d = len(paths), self.spec.dim_state
        if self.ensemble is None:
            means = np.broadcast_to(self.spec.x0, (R, len(grid), d)).copy()
            return means, np.sum(means**2, axis=-1)
        ens = self.ensemble
        s0 = self.spec.n_regimes
        occ_sim = np.stack([_occupation_curve(p, grid, s0) for p in paths])  # (R, n, s0)
        occ_blk = np.stack([_occupation_curve(p, grid, s0) for p in ens.paths])  # (B, n, s0)
        blk_regs = np.stack([p.state_at(grid) for p in ens.paths])  # (B, n)
        dist = np.sum((occ_sim[:, None] - occ_blk[None]) ** 2, axis=-1)  # (R, B, n)
        same = blk_regs[None] == node_regimes[:, None]
        has_same = same.any(axis=1, keepdims=True)
        dist = np.where(same | ~has_same, dist, np.inf)
        pick = np.argmin(dist, axis=1)  # (R, n)
        eg = ens.grid
        bm = np.stack([np.stack([np.interp(grid, eg, ens.block_mean[:, b, k]) for k in range(d)], -1)
                       for b in range(ens.blocks)])  # (B, n, d)
        b2 = np.stack([np.interp(grid, eg, ens.block_m2[:, b]) for b in range(ens.blocks)])
        cols = np.arange(len(grid))[None, :]
        return bm[pick, cols], b2[pick, cols]


# --------------------------------------------------------------------------- deviations


@dataclass(frozen=True)
class Deviation:
    """Strategy of player 0 in one arm: ``identity``, ``scale``, ``shift`` or ``frozen-flow``."""

    kind: str
    value: float = 0.0
    coord: int = 0

    @property
    def name(self) -> str:
        if self.kind == "scale":
            return f"scale={self.value:g}"
        if self.kind == "shift":
            return f"shift[{self.coord}]={self.value:+g}"
        return self.kind

    def __post_init__(self):
        if self.kind not in ("identity", "scale", "shift", "frozen-flow"):
            raise ValueError(f"unknown deviation kind {self.kind!r}")


def default_deviation_family(spec: GameSpec) -> list[Deviation]:
    fam = [Deviation("frozen-flow")]
    fam += [Deviation("scale", c) for c in (0.5, 0.9, 1.1, 1.5)]
    fam += [Deviation("shift", s, k) for k in range(spec.dim_control) for s in (-0.5, -0.1, 0.1, 0.5)]
    return fam


# --------------------------------------------------------------------------- simulation


@dataclass
class SimulationRun:
    """One arm of an N-player experiment, all replications."""

    N: int
    arm: str
    grid: np.ndarray
    node_regimes: np.ndarray  # (R, n+1)
    limit_mean: np.ndarray  # (R, n+1, d)
    limit_m2: np.ndarray
    emp_mean: np.ndarray  # (R, n+1, d)
    emp_m2: np.ndarray
    costs: np.ndarray  # (R, N)
    alpha_sq: np.ndarray  # (R, N), time integral of |alpha|^2
    x_sq: np.ndarray  # (n+1,), mean over replications and players of |X_t|^2
    X: np.ndarray | None = None  # (R, n+1, N, d)
    infinite: bool = False

    @property
    def reps(self) -> int:
        return self.costs.shape[0]

    @property
    def dt(self) -> float:
        return float(self.grid[1] - self.grid[0])


def draw_noise(spec: GameSpec, N: int, reps: int, n_t: int, seed: int, start: int = 0, tag: str = "sim-bm"):
    """Regime paths and Brownian increments ``(R, n_t, N, d)`` for replications ``start..``.

    The regime path of replication ``r`` does not depend on ``tag``, so a
    second tag gives independent particles on the same regime paths.
    """
    dt = spec.horizon / n_t
    paths, dW = [], np.empty((reps, n_t, N, spec.dim_state))
    for k in range(reps):
        r = start + k
        paths.append(sample_path(spec.regimes, spec.initial_regime, spec.horizon, stream(seed, "sim-regime", r)))
        dW[k] = math.sqrt(dt) * stream(seed, tag, r).standard_normal((n_t, N, spec.dim_state))
    return paths, dW


def _sorted_moments(X):
    """Empirical mean and second moment over the player axis, independent of player order."""
    N = X.shape[-2]
    mean = np.sort(X, axis=-2).sum(axis=-2) / N
    m2 = np.sort(np.sum(X**2, axis=-1), axis=-1).sum(axis=-1) / N
    return mean, m2


def _controls(spec, source, t, x, mu_lim, mu_dyn, i, arms):
    p = source.feedback(t, x, mu_lim.mean, i)
    a = alpha_hat(spec, t, x, mu_lim, p, i)
    for k, dev in enumerate(arms):
        if dev is None or dev.kind == "identity":
            continue
        a0 = a[k, :, 0]
        if dev.kind == "scale":
            a[k, :, 0] = dev.value * a0
        elif dev.kind == "shift":
            a[k, :, 0, dev.coord] = a0[..., dev.coord] + dev.value
        else:
            x0 = x[k, :, :1]
            mu0 = MeasureArg(mu_dyn.mean[k], mu_dyn.second_moment[k])
            p0 = source.feedback(t, x0, mu0.mean, i)
            a[k, :, 0] = alpha_hat(spec, t, x0, mu0, p0, i)[:, 0]
    return a


def run_system(spec: GameSpec, source, paths: list[RegimePath], dW: np.ndarray,
               arms: list | None = None, infinite: bool = False, keep_paths: bool = False) -> list[SimulationRun]:
    """Euler-Maruyama for every arm on the given noise; ``arms[0]`` should be ``None`` (baseline).

    With ``infinite`` the empirical measure is replaced by the limit law in
    drift, diffusion and costs.
    """
    arms = [None] if arms is None else list(arms)
    R, n_t, N, d = dW.shape
    T = spec.horizon
    grid = np.linspace(0.0, T, n_t + 1)
    dt = T / n_t
    node_regimes = np.stack([p.state_at(grid) for p in paths]).astype(int)
    lim_mean, lim_m2 = source.limit_law(paths, grid, node_regimes)
    A = len(arms)
    X = np.broadcast_to(spec.x0, (A, R, N, d)).copy()
    Xs = np.empty((A, R, n_t + 1, N, d)) if keep_paths else None
    emp_mean = np.empty((A, R, n_t + 1, d))
    emp_m2 = np.empty((A, R, n_t + 1))
    cost = np.zeros((A, R, N))
    asq = np.zeros((A, R, N))
    xsq = np.empty((A, n_t + 1))
    for n in range(n_t + 1):
        t = grid[n]
        w = 0.5 * dt if n in (0, n_t) else dt
        if infinite:
            emp_mean[:, :, n] = lim_mean[None, :, n]
            emp_m2[:, :, n] = lim_m2[None, :, n]
        else:
            emp_mean[:, :, n], emp_m2[:, :, n] = _sorted_moments(X)
        if keep_paths:
            Xs[:, :, n] = X
        xsq[:, n] = np.sum(X**2, axis=-1).mean(axis=(1, 2))
        Xn = np.empty_like(X)
        for i in np.unique(node_regimes[:, n]):
            idx = np.flatnonzero(node_regimes[:, n] == i)
            x = X[:, idx]
            mu_lim = MeasureArg(np.broadcast_to(lim_mean[idx, n][None, :, None, :], (A, len(idx), 1, d)),
                                np.broadcast_to(lim_m2[idx, n][None, :, None], (A, len(idx), 1)))
            mu_dyn = MeasureArg(emp_mean[:, idx, n][:, :, None, :], emp_m2[:, idx, n][:, :, None])
            a = _controls(spec, source, t, x, mu_lim, mu_dyn, i, arms)
            asq[:, idx] += w * np.sum(a**2, axis=-1)
            if n == n_t:
                cost[:, idx] += w * spec.f(t, x, mu_dyn, a, i) + spec.g(x, mu_dyn, i)
                continue
            cost[:, idx] += w * spec.f(t, x, mu_dyn, a, i)
            sig = spec.sigma(t, x, mu_dyn, i)
            Xn[:, idx] = (x + spec.drift(t, x, mu_dyn, a, i) * dt
                          + np.einsum("...ij,...j->...i", sig, dW[idx, n][None]))
        if n < n_t:
            X = Xn
    runs = []
    for k, dev in enumerate(arms):
        runs.append(SimulationRun(
            N=N, arm="baseline" if dev is None else dev.name, grid=grid, node_regimes=node_regimes,
            limit_mean=lim_mean, limit_m2=lim_m2, emp_mean=emp_mean[k], emp_m2=emp_m2[k],
            costs=cost[k], alpha_sq=asq[k], x_sq=xsq[k],
            X=None if Xs is None else Xs[k], infinite=infinite))
    return runs


def simulate(spec: GameSpec, N: int, source, reps: int, n_t: int, seed: int, arms: list | None = None,
             infinite: bool = False, keep_paths: bool = False, chunk: int = 256) -> list[SimulationRun]:
    """Simulate ``reps`` replications of the N-player system for each arm.

    Replications are processed in chunks; chunk boundaries do not affect
    results because every replication has its own streams.
    """
    if N < 2 and not infinite:
        raise ValueError("an N-player game needs N >= 2")
    if reps < 1 or n_t < 1:
        raise ValueError("reps and n_t must be positive")
    parts = []
    for start in range(0, reps, chunk):
        paths, dW = draw_noise(spec, N, min(chunk, reps - start), n_t, seed, start)
        parts.append(run_system(spec, source, paths, dW, arms, infinite, keep_paths))
    if len(parts) == 1:
        return parts[0]
    return [_concat([p[k] for p in parts]) for k in range(len(parts[0]))]


def _concat(runs: list[SimulationRun]) -> SimulationRun:
    r0 = runs[0]
    cat = lambda name: np.concatenate([getattr(r, name) for r in runs])  # noqa: E731
    w = np.array([r.reps for r in runs], dtype=float)
    return SimulationRun(
        N=r0.N, arm=r0.arm, grid=r0.grid, node_regimes=cat("node_regimes"), limit_mean=cat("limit_mean"),
        limit_m2=cat("limit_m2"), emp_mean=cat("emp_mean"), emp_m2=cat("emp_m2"), costs=cat("costs"),
        alpha_sq=cat("alpha_sq"), x_sq=np.einsum("k,kn->n", w / w.sum(), np.stack([r.x_sq for r in runs])),
        X=None if r0.X is None else cat("X"), infinite=r0.infinite)


# --------------------------------------------------------------------------- costs and gaps


@dataclass(frozen=True)
class CostEstimate:
    estimate: float
    stderr: float
    reps: int
    values: np.ndarray
    dt: float = float("nan")

    @classmethod
    def from_values(cls, values, dt: float = float("nan")) -> "CostEstimate":
        v = np.asarray(values, dtype=float).ravel()
        if v.size < MIN_REPS:
            raise ValueError(f"need at least {MIN_REPS} replications, got {v.size}")
        return cls(float(v.mean()), float(v.std(ddof=1) / math.sqrt(v.size)), int(v.size), v, dt)

    def ci(self, z: float = 1.96) -> tuple[float, float]:
        return self.estimate - z * self.stderr, self.estimate + z * self.stderr


def estimate_cost(spec: GameSpec, run: SimulationRun, player_index: int = 0) -> CostEstimate:
    """Trapezoidal running cost plus terminal cost for one player; bias is O(dt)."""
    if not 0 <= player_index < run.N:
        raise IndexError(f"player {player_index} outside 0..{run.N - 1}")
    return CostEstimate.from_values(run.costs[:, player_index], run.dt)


@dataclass
class NashGapRow:
    N: int
    baseline: CostEstimate
    diffs: dict  # arm name -> CostEstimate of (baseline - arm), paired
    eps_N: float

    @property
    def best_arm(self) -> str:
        return max(self.diffs, key=lambda k: self.diffs[k].estimate)

    @property
    def gap(self) -> float:
        return self.diffs[self.best_arm].estimate

    @property
    def gap_clamped(self) -> float:
        return max(self.gap, 0.0)

    @property
    def gap_stderr(self) -> float:
        return self.diffs[self.best_arm].stderr


@dataclass
class NashGapReport:
    rows: list[NashGapRow]
    infinite: bool = False
    meta: dict = field(default_factory=dict)

    @property
    def fitted_constant(self) -> float:
        """``gap / eps_N`` at the smallest N."""
        r = self.rows[0]
        return r.gap_clamped / r.eps_N

    def non_increasing_within_ci(self, z: float = 1.96) -> bool:
        for a, b in zip(self.rows, self.rows[1:]):
            if b.gap_clamped - a.gap_clamped > z * math.hypot(a.gap_stderr, b.gap_stderr):
                return False
        return True


def nash_gap(spec: GameSpec, N_sweep, source, deviations: list | None = None, reps: int = 400,
             n_t: int = 50, seed: int = 0, infinite: bool = False) -> NashGapReport:
    """Baseline cost of player 0 and paired cost differences for each deviation arm, per N."""
    devs = default_deviation_family(spec) if deviations is None else list(deviations)
    if not devs:
        raise ValueError("deviation family must be nonempty")
    d = spec.dim_state
    rows = []
    for N in N_sweep:
        runs = simulate(spec, int(N), source, reps, n_t, seed, arms=[None] + devs, infinite=infinite)
        base = estimate_cost(spec, runs[0], 0)
        diffs = {}
        for dev, run in zip(devs, runs[1:]):
            diffs[dev.name] = CostEstimate.from_values(runs[0].costs[:, 0] - run.costs[:, 0], run.dt)
        rows.append(NashGapRow(int(N), base, diffs, epsilon_rate(int(N), d)))
    return NashGapReport(rows, infinite, {"spec": spec.name, "seed": seed, "reps": reps, "n_t": n_t})


def calibrate_time_steps(spec: GameSpec, source, N: int, reps: int, seed: int, start: int = 16,
                         max_doublings: int = 6):
    """Smallest ``n_t = start * 2^k`` with ``|J(n_t) - J(2 n_t)| <= stderr / 2``.

    Both resolutions run on the same Brownian paths (coarse increments are
    sums of adjacent fine ones), so the difference isolates the time bias.
    Returns ``(n_t, history)`` with history rows ``(n_t, J(n_t) - J(2 n_t), stderr)``.
    """
    hist = []
    n = start
    for _ in range(max_doublings + 1):
        paths, dW = draw_noise(spec, N, reps, 2 * n, seed)
        fine = estimate_cost(spec, run_system(spec, source, paths, dW)[0])
        coarse = estimate_cost(spec, run_system(spec, source, paths, dW[:, 0::2] + dW[:, 1::2])[0])
        diff = coarse.estimate - fine.estimate
        hist.append((n, diff, fine.stderr))
        if abs(diff) <= fine.stderr / 2:
            return n, hist
        n *= 2
    return n, hist


def write_runs_csv(spec: GameSpec, runs: list[SimulationRun], path) -> None:
    """Per-arm summary: player-0 cost, mean time-integrated |alpha|^2 and sup_t E|X_t|^2."""
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["N", "arm", "reps", "n_t", "cost", "stderr", "alpha_sq", "sup_x_sq"])
        for r in runs:
            c = estimate_cost(spec, r, 0)
            w.writerow([r.N, r.arm, r.reps, len(r.grid) - 1, repr(c.estimate), repr(c.stderr),
                        repr(float(r.alpha_sq.mean())), repr(float(r.x_sq.max()))])


def write_gap_csv(report: NashGapReport, path) -> None:
    with open(Path(path), "w", newline="") as fh:
        meta = " ".join(f"{k}={v}" for k, v in sorted(report.meta.items()))
        fh.write(f"# nash gap infinite={report.infinite} {meta}\n")
        w = csv.writer(fh)
        w.writerow(["N", "arm", "diff", "stderr", "baseline", "baseline_stderr", "eps_N"])
        for row in report.rows:
            for name, est in row.diffs.items():
                w.writerow([row.N, name, repr(est.estimate), repr(est.stderr), repr(row.baseline.estimate),
                            repr(row.baseline.stderr), repr(row.eps_N)])
            w.writerow([row.N, "best:" + row.best_arm, repr(row.gap), repr(row.gap_stderr),
                        repr(row.baseline.estimate), repr(row.baseline.stderr), repr(row.eps_N)])
