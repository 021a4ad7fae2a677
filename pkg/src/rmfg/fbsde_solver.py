"""Picard particle solver for the conditional McKean-Vlasov FBSDE with regime switching.

Each Picard sweep freezes the feedback field ``u^k``, simulates ``B`` blocks
of particles forward (one regime path per block, so the block's empirical law
is the conditional law given the regime path), then fits ``u^{k+1}`` backwards
by least squares, one fit per (time node, regime).

Two devices keep the regression well posed:

* probe particles start on a spread of initial states and follow the same
  dynamics, but are excluded from the block law. They make ``u(t, .)``
  identifiable away from the population cloud (at ``t = 0`` the population
  sits at a single point).
* a regime with too few blocks at a node borrows the other blocks and
  replays their last Brownian step under its own coefficients.

The random sample (regime paths, Brownian increments, probe starts) is drawn
once, so the Picard map is deterministic and its change norm is noise-free.
"""

from __future__ import annotations

import csv
import io
import itertools
import time
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .game_model import GameSpec, MeasureArg, TimeOutOfRange
from .hamiltonian import alpha_hat
from .regime_chain import RegimePath, sample_path
from .rng import stream

__all__ = [
    "PicardDivergence",
    "RegressionRankDeficiency",
    "FbsdeBudget",
    "NodeFit",
    "DecouplingField",
    "ParticleEnsemble",
    "PicardReport",
    "solve",
    "evaluate_field",
    "conditional_law_summary",
    "bsde_residual",
    "fit_node",
    "zero_field",
    "write_field",
    "read_field",
    "write_picard_csv",
]

FIELD_HEADER = "rmfg-field v1"
MAX_CONDITION = 1e12


class PicardDivergence(RuntimeError):
    pass


class RegressionRankDeficiency(UserWarning):
    pass


@dataclass(frozen=True)
class FbsdeBudget:
    blocks: int = 32
    particles: int = 1024
    n_steps: int = 64
    max_picard: int = 30
    tol: float = 1e-4
    degree: int = 3
    damping: float = 0.5
    probes: int = 256
    probe_halfwidth: float = 3.0
    min_regime_blocks: int = 4
    # polynomial degree in the block mean; higher degrees fit Monte Carlo noise in the mean
    mean_degree: int = 1

    def check(self) -> None:
        if self.blocks < 16 or self.particles < 256 or self.n_steps < 32:
            raise ValueError("budget needs blocks >= 16, particles >= 256, n_steps >= 32")
        if not 0 < self.damping <= 1:
            raise ValueError("damping must lie in (0, 1]")
        if self.degree < 1 or self.mean_degree < 0 or self.max_picard < 1 or self.probes < 0:
            raise ValueError("degree and max_picard must be positive, probes nonnegative")


# --------------------------------------------------------------------------- basis


def _exponents(d: int, degree: int, uses_mean: bool, mdegree: int) -> np.ndarray:
    nvar = 2 * d if uses_mean else d
    out = []
    for e in itertools.product(range(degree + 1), repeat=nvar):
        if sum(e) <= degree and sum(e[d:]) <= mdegree:
            out.append(e)
    out.sort(key=lambda e: (sum(e), tuple(-v for v in e)))
    return np.array(out, dtype=int).reshape(len(out), nvar)


@dataclass(frozen=True)
class NodeFit:
    """Polynomial fit of ``u(t_n, ., ., i)`` in standardised ``(x, m)`` coordinates."""

    shift: np.ndarray
    scale: np.ndarray
    coef: np.ndarray  # (n_basis, d)
    degree: int
    mdegree: int
    uses_mean: bool
    resid_var: float = 0.0

    @property
    def dim(self) -> int:
        return self.coef.shape[1]

    @property
    def exponents(self) -> np.ndarray:
        cache = self.__dict__.get("_exp")
        if cache is None:
            cache = _exponents(self.dim, self.degree, self.uses_mean, self.mdegree)
            object.__setattr__(self, "_exp", cache)
        return cache

    def _z(self, x, m):
        x = np.asarray(x, dtype=float)
        if self.uses_mean:
            m = np.broadcast_to(np.asarray(m, dtype=float), x.shape)
            x = np.concatenate([x, m], axis=-1)
        return (x - self.shift) / self.scale

    def value(self, x, m) -> np.ndarray:
        return _design(self._z(x, m), self.exponents) @ self.coef

    def jacobian(self, x, m):
        """``(du/dx, du/dm)``, each of shape ``[..., d, d]`` (output, input)."""
        z = self._z(x, m)
        d = self.dim
        grads = []
        for v in range(z.shape[-1]):
            ex = self.exponents.copy()
            lead = ex[:, v].astype(float)
            ex[:, v] = np.maximum(ex[:, v] - 1, 0)
            phi = _design(z, ex) * lead
            grads.append((phi @ self.coef) / self.scale[v])
        jx = np.stack(grads[:d], axis=-1)
        if self.uses_mean:
            jm = np.stack(grads[d:], axis=-1)
        else:
            jm = np.zeros_like(jx)
        return jx, jm


def _design(z: np.ndarray, exponents: np.ndarray) -> np.ndarray:
    nvar = z.shape[-1]
    if nvar == 0 or exponents.size == 0:
        return np.ones(z.shape[:-1] + (len(exponents),))
    top = int(exponents.max())
    cols = [z[..., v] for v in range(nvar)]
    pows = [[np.ones_like(c), c] for c in cols]
    for v in range(nvar):
        for _ in range(top - 1):
            pows[v].append(pows[v][-1] * cols[v])
    out = np.empty(z.shape[:-1] + (len(exponents),))
    for k, e in enumerate(exponents):
        acc = None
        for v in range(nvar):
            if e[v]:
                acc = pows[v][e[v]] if acc is None else acc * pows[v][e[v]]
        out[..., k] = 1.0 if acc is None else acc
    return out


def fit_node(x: np.ndarray, m: np.ndarray, y: np.ndarray, degree: int, uses_mean: bool,
             mdegree: int | None = None) -> NodeFit:
    """Least-squares fit of targets ``y`` on the polynomial basis, shrinking degree if ill-conditioned."""
    d = x.shape[-1]
    z = np.concatenate([x, m], axis=-1) if uses_mean else x
    shift = z.mean(axis=0)
    scale = z.std(axis=0)
    scale = np.where(scale > 1e-12 * (1 + np.abs(shift)), scale, 1.0)
    zs = (z - shift) / scale
    mdeg = degree if mdegree is None else mdegree
    deg = degree
    while True:
        ex = _exponents(d, deg, uses_mean, min(mdeg, deg))
        phi = _design(zs, ex)
        coef, _, rank, sv = np.linalg.lstsq(phi, y, rcond=None)
        cond = (sv[0] / sv[-1]) ** 2 if sv[-1] > 0 else np.inf
        if (cond <= MAX_CONDITION and rank == phi.shape[1]) or deg == 1:
            break
        warnings.warn(f"normal-equation condition {cond:.2e} > {MAX_CONDITION:g}; "
                      f"reducing basis degree {deg} -> {deg - 1}", RegressionRankDeficiency,
                      stacklevel=2)
        deg -= 1
    resid = y - phi @ coef
    return NodeFit(shift, scale, coef, deg, min(mdeg, deg), uses_mean,
                   float(np.mean(np.sum(resid**2, axis=-1))))


def _constant_fit(d: int, value: np.ndarray | None = None) -> NodeFit:
    coef = np.zeros((1, d)) if value is None else np.asarray(value, dtype=float).reshape(1, d)
    return NodeFit(np.zeros(d), np.ones(d), coef, 0, 0, False)


# --------------------------------------------------------------------------- field


@dataclass
class DecouplingField:
    """``u(t, x, m, i)`` as per-node, per-regime polynomial fits with linear time interpolation."""

    grid: np.ndarray
    fits: list  # fits[n][i] -> NodeFit
    dim: int
    degree: int
    lipschitz_bound: float = float("nan")
    growth_constant: float = float("nan")

    @property
    def n_regimes(self) -> int:
        return len(self.fits[0])

    @property
    def horizon(self) -> float:
        return float(self.grid[-1])

    def at_node(self, n: int, x, m, i: int) -> np.ndarray:
        return self.fits[n][i].value(x, m)

    def jacobian_at_node(self, n: int, x, m, i: int):
        return self.fits[n][i].jacobian(x, m)

    def __call__(self, t, x, m, i):
        return evaluate_field(self, t, x, m, i)


def zero_field(grid, dim: int, n_regimes: int, degree: int = 3) -> DecouplingField:
    fits = [[_constant_fit(dim) for _ in range(n_regimes)] for _ in grid]
    return DecouplingField(np.asarray(grid, dtype=float), fits, dim, degree)


def evaluate_field(field: DecouplingField, t: float, x, xbar, i: int) -> np.ndarray:
    g = field.grid
    if not g[0] - 1e-12 <= t <= g[-1] + 1e-12:
        raise TimeOutOfRange(f"t={t} outside [{g[0]}, {g[-1]}]")
    if not 0 <= i < field.n_regimes:
        from .regime_chain import RegimeOutOfRange
        raise RegimeOutOfRange(f"regime {i} outside 0..{field.n_regimes - 1}")
    n = int(np.clip(np.searchsorted(g, t, side="right") - 1, 0, len(g) - 2))
    w = (t - g[n]) / (g[n + 1] - g[n])
    w = min(max(w, 0.0), 1.0)
    lo = field.at_node(n, x, xbar, i)
    if w == 0.0:
        return lo
    return (1 - w) * lo + w * field.at_node(n + 1, x, xbar, i)


# --------------------------------------------------------------------------- ensemble


@dataclass
class ParticleEnsemble:
    """Forward/backward trajectories, node-major: ``X[n, b, p, :]``.

    Particles ``0 .. n_pop-1`` of each block form the block's empirical law;
    the remaining ones are probes.
    """

    grid: np.ndarray
    paths: list[RegimePath]
    node_regimes: np.ndarray  # (n_t+1, B)
    X: np.ndarray
    P: np.ndarray
    alpha: np.ndarray  # (n_t, B, P_tot, m)
    dW: np.ndarray  # (n_t, B, P_tot, d)
    block_mean: np.ndarray  # (n_t+1, B, d)
    block_m2: np.ndarray  # (n_t+1, B)
    n_pop: int
    seed: int

    @property
    def blocks(self) -> int:
        return self.X.shape[1]

    def mu(self, n: int, blocks=slice(None)) -> MeasureArg:
        """Moment summary of block laws at node ``n``, broadcastable over particles."""
        return MeasureArg(self.block_mean[n, blocks][:, None, :], self.block_m2[n, blocks][:, None])


def conditional_law_summary(ens: ParticleEnsemble, block: int, node: int) -> MeasureArg:
    if not 0 <= block < ens.blocks or not 0 <= node < len(ens.grid):
        raise IndexError("block or node out of range")
    return MeasureArg.empirical(ens.X[node, block, : ens.n_pop])


@dataclass
class PicardReport:
    change: list[float] = field(default_factory=list)
    law_drift: list[float] = field(default_factory=list)
    wall_clock: list[float] = field(default_factory=list)
    converged: bool = False
    tol: float = 0.0

    @property
    def iterations(self) -> int:
        return len(self.change)


# --------------------------------------------------------------------------- solver


def _grad_x_hamiltonian(spec: GameSpec, t, x, mu, a, p, q, i):
    """``b1' p + grad_x f + grad_x tr(q' sigma)``; the last term vanishes for constant sigma."""
    out = p @ np.atleast_2d(spec.b1(t, i)) + spec.grad_x_f(t, x, mu, a, i)
    if not spec.sigma_constant:
        h = 1e-6
        for k in range(spec.dim_state):
            e = np.zeros(spec.dim_state)
            e[k] = h
            sp = spec.sigma(t, x + e, mu, i)
            sm = spec.sigma(t, x - e, mu, i)
            out[..., k] += np.einsum("...ij,...ij->...", q, sp - sm) / (2 * h)
    return out


def _draw_sample(spec: GameSpec, budget: FbsdeBudget, seed: int):
    B, N, d = budget.blocks, budget.n_steps, spec.dim_state
    ptot = budget.particles + budget.probes
    dt = spec.horizon / N
    grid = np.linspace(0.0, spec.horizon, N + 1)
    paths, dW, x0 = [], np.empty((N, B, ptot, d)), np.empty((B, ptot, d))
    for b in range(B):
        paths.append(sample_path(spec.regimes, spec.initial_regime, spec.horizon,
                                 stream(seed, "fbsde-regime", b)))
        dW[:, b] = np.sqrt(dt) * stream(seed, "fbsde-bm", b).standard_normal((N, ptot, d))
        x0[b, : budget.particles] = spec.x0
        u = stream(seed, "fbsde-probe", b).uniform(-1.0, 1.0, (budget.probes, d))
        x0[b, budget.particles:] = spec.x0 + budget.probe_halfwidth * u
    node_regimes = np.array([[p.state_at(t) for p in paths] for t in grid], dtype=int)
    return grid, paths, dW, x0, node_regimes


def _forward(spec, field, grid, dW, x0, node_regimes, n_pop):
    N, B, ptot, d = dW.shape
    dt = grid[1] - grid[0]
    X = np.empty((N + 1, B, ptot, d))
    A = np.empty((N, B, ptot, spec.dim_control))
    mean = np.empty((N + 1, B, d))
    m2 = np.empty((N + 1, B))
    X[0] = x0
    for n in range(N + 1):
        pop = X[n, :, :n_pop]
        mean[n] = pop.mean(axis=1)
        m2[n] = np.sum(pop**2, axis=2).mean(axis=1)
        if n == N:
            break
        t = grid[n]
        for i in np.unique(node_regimes[n]):
            idx = np.flatnonzero(node_regimes[n] == i)
            x = X[n, idx]
            mu = MeasureArg(mean[n, idx][:, None, :], m2[n, idx][:, None])
            p = field.at_node(n, x, mu.mean, i)
            a = alpha_hat(spec, t, x, mu, p, i)
            A[n, idx] = a
            sig = spec.sigma(t, x, mu, i)
            X[n + 1, idx] = x + spec.drift(t, x, mu, a, i) * dt + np.einsum("...ij,...j->...i", sig, dW[n, idx])
    return X, A, mean, m2


def _test_points(spec: GameSpec, budget: FbsdeBudget) -> np.ndarray:
    d = spec.dim_state
    if d == 1:
        return (spec.x0 + np.linspace(-budget.probe_halfwidth, budget.probe_halfwidth, 25)[:, None])
    u = stream(0, "fbsde-test-points").uniform(-1, 1, (64, d))
    return spec.x0 + budget.probe_halfwidth * u


def _field_change(new, old, test_x, mean):
    worst = 0.0
    for n in range(len(new.grid)):
        m = np.median(mean[n], axis=0)
        for i in range(new.n_regimes):
            diff = new.at_node(n, test_x, m, i) - old.at_node(n, test_x, m, i)
            worst = max(worst, float(np.max(np.abs(diff))))
    return worst


def _law_drift(X_new, X_old, n_pop):
    """Mean over blocks of the 1-D W2 between successive block laws at the horizon.

    For ``d > 1`` the largest coordinate-marginal distance is used (a lower bound).
    """
    a = np.sort(X_new[-1, :, :n_pop], axis=1)
    b = np.sort(X_old[-1, :, :n_pop], axis=1)
    per = np.sqrt(np.mean((a - b) ** 2, axis=1))
    return float(np.mean(np.max(per, axis=-1)))


def _backward(spec, budget, old, grid, X, A, dW, mean, m2, node_regimes, n_pop):
    N, B, ptot, d = dW.shape
    s0 = spec.n_regimes
    dt = grid[1] - grid[0]
    q = spec.regimes.rates
    theta = budget.damping
    fits: list = [None] * (N + 1)

    # terminal fit: grad_x g for every regime, on all particles
    xT = X[N].reshape(-1, d)
    mT = np.repeat(mean[N], ptot, axis=0)
    muT = MeasureArg(mT, np.repeat(m2[N], ptot))
    use_m = _mean_identifiable(mean[N], budget)
    fits[N] = [fit_node(xT, mT, spec.grad_x_g(xT, muT, j), budget.degree, use_m, budget.mean_degree)
               for j in range(s0)]
    # the recursion runs on the undamped fits; the returned field blends them with u^k
    damped: list = [None] * N + [fits[N]]

    for n in range(N - 1, -1, -1):
        t = grid[n]
        row, damped_row = [], []
        for i in range(s0):
            own = np.flatnonzero(node_regimes[n] == i)
            blocks = own if len(own) >= budget.min_regime_blocks else np.arange(B)
            x = X[n, blocks]
            mu = MeasureArg(mean[n, blocks][:, None, :], m2[n, blocks][:, None])
            p_old = old.at_node(n, x, mu.mean, i)
            jx_old, _ = old.jacobian_at_node(n, x, mu.mean, i)
            sig = spec.sigma(t, x, mu, i)
            if len(own) >= budget.min_regime_blocks:
                a = A[n, blocks]
                x1 = X[n + 1, blocks]
                m1 = mean[n + 1, blocks]
            else:
                # replay the step under regime i's coefficients
                a = alpha_hat(spec, t, x, mu, p_old, i)
                x1 = x + spec.drift(t, x, mu, a, i) * dt + np.einsum("...ij,...j->...i", sig, dW[n, blocks])
                m1 = x1[:, :n_pop].mean(axis=1)
            noise = np.einsum("...ij,...j->...i", sig, dW[n, blocks])
            noise_m = noise[:, :n_pop].mean(axis=1)
            m1b = np.broadcast_to(m1[:, None, :], x1.shape)
            mb = np.broadcast_to(mu.mean, x.shape)
            y = np.zeros_like(x)
            for j in range(s0):
                w = (1.0 + q[i, i] * dt) if j == i else q[i, j] * dt
                if w == 0.0:
                    continue
                nxt = fits[n + 1][j]
                jx, jm = nxt.jacobian(x, mb)
                y += w * (nxt.value(x1, m1b)
                          - np.einsum("...ij,...j->...i", jx, noise)
                          - np.einsum("...ij,...j->...i", jm, np.broadcast_to(noise_m[:, None, :], x.shape)))
            qhat = jx_old @ sig
            y += dt * _grad_x_hamiltonian(spec, t, x, mu, a, p_old, qhat, i)
            use_m = _mean_identifiable(mean[n, blocks], budget)
            targets = np.concatenate([y, theta * y + (1.0 - theta) * p_old], axis=-1)
            both = fit_node(x.reshape(-1, d), mb.reshape(-1, d), targets.reshape(-1, 2 * d),
                            budget.degree, use_m, budget.mean_degree)
            row.append(replace(both, coef=both.coef[:, :d]))
            damped_row.append(replace(both, coef=both.coef[:, d:]))
        fits[n] = row
        damped[n] = damped_row
    return DecouplingField(grid.copy(), damped, d, budget.degree)


def _mean_identifiable(means: np.ndarray, budget: FbsdeBudget) -> bool:
    if len(means) < budget.min_regime_blocks or budget.mean_degree == 0:
        return False
    spread = means.std(axis=0)
    return bool(np.all(spread > 1e-9 * (1.0 + np.abs(means.mean(axis=0)))))


def _fill_backward_values(ens: ParticleEnsemble, spec: GameSpec, field: DecouplingField) -> None:
    N = len(ens.grid) - 1
    for n in range(N + 1):
        for i in np.unique(ens.node_regimes[n]):
            idx = np.flatnonzero(ens.node_regimes[n] == i)
            x = ens.X[n, idx]
            mb = ens.block_mean[n, idx][:, None, :]
            if n == N:
                mu = MeasureArg(mb, ens.block_m2[n, idx][:, None])
                ens.P[n, idx] = spec.grad_x_g(x, mu, i)
            else:
                ens.P[n, idx] = field.at_node(n, x, mb, i)


def _field_bounds(field: DecouplingField, test_x, mean) -> tuple[float, float]:
    lip, growth = 0.0, 0.0
    r = np.linalg.norm(test_x, axis=-1)
    for n in range(len(field.grid)):
        m = np.median(mean[n], axis=0)
        for i in range(field.n_regimes):
            jx, _ = field.jacobian_at_node(n, test_x, m, i)
            lip = max(lip, float(np.max(np.linalg.norm(jx, ord=2, axis=(-2, -1)))))
            val = np.linalg.norm(field.at_node(n, test_x, m, i), axis=-1)
            growth = max(growth, float(np.max(val / (1 + r))))
    return lip, growth


def solve(spec: GameSpec, budget: FbsdeBudget | None = None, seed: int = 0,
          initial_field: DecouplingField | None = None):
    """Run damped Picard iteration; returns ``(field, ensemble, report)``."""
    budget = FbsdeBudget() if budget is None else budget
    budget.check()
    grid, paths, dW, x0, node_regimes = _draw_sample(spec, budget, seed)
    n_pop = budget.particles
    field = initial_field or zero_field(grid, spec.dim_state, spec.n_regimes, budget.degree)
    test_x = _test_points(spec, budget)
    report = PicardReport(tol=budget.tol)
    X_prev = None
    increases = 0
    for _ in range(budget.max_picard):
        t0 = time.perf_counter()
        X, A, mean, m2 = _forward(spec, field, grid, dW, x0, node_regimes, n_pop)
        new = _backward(spec, budget, field, grid, X, A, dW, mean, m2, node_regimes, n_pop)
        change = _field_change(new, field, test_x, mean)
        report.law_drift.append(0.0 if X_prev is None else _law_drift(X, X_prev, n_pop))
        report.change.append(change)
        report.wall_clock.append(time.perf_counter() - t0)
        X_prev = X
        field = new
        if len(report.change) >= 2 and report.change[-1] > report.change[-2]:
            increases += 1
            if increases >= 3:
                raise PicardDivergence(f"field change grew 3 iterations in a row: {report.change[-4:]}")
        else:
            increases = 0
        if change <= budget.tol:
            report.converged = True
            break
    # final forward pass under the returned field, so the ensemble is consistent with it
    X, A, mean, m2 = _forward(spec, field, grid, dW, x0, node_regimes, n_pop)
    ens = ParticleEnsemble(grid, paths, node_regimes, X, np.empty_like(X), A, dW, mean, m2, n_pop, seed)
    _fill_backward_values(ens, spec, field)
    field.lipschitz_bound, field.growth_constant = _field_bounds(field, test_x, mean)
    return field, ens, report


def bsde_residual(ens: ParticleEnsemble, spec: GameSpec, field: DecouplingField) -> float:
    """Mean squared one-step defect of the discretised backward equation.

    ``r_n = P_n - P_{n+1} - dt grad_x H + Q_n dW_n + sum_j Lambda_j dM_j`` with
    ``Lambda_j = u(t_{n+1}, X_{n+1}, j) - u(t_{n+1}, X_{n+1}, I_n)`` (pre-jump
    regime) and the realised, compensated jump increments of the block's path.
    """
    N = len(ens.grid) - 1
    dt = ens.grid[1] - ens.grid[0]
    q = spec.regimes.rates
    s0 = spec.n_regimes
    total, count = 0.0, 0
    for n in range(N):
        t = ens.grid[n]
        for b in range(ens.blocks):
            i = int(ens.node_regimes[n, b])
            path = ens.paths[b]
            lo, hi = np.searchsorted(path.jump_times, [t, ens.grid[n + 1]], side="right")
            prev = path._all_states()[lo:hi + 1]
            x = ens.X[n, b, : ens.n_pop]
            x1 = ens.X[n + 1, b, : ens.n_pop]
            mu = ens.mu(n, [b])
            m1 = ens.block_mean[n + 1, b]
            jx, _ = field.jacobian_at_node(n, x, mu.mean[0], i)
            sig = spec.sigma(t, x, MeasureArg(mu.mean[0], mu.second_moment[0]), i)
            qhat = jx @ sig
            p = ens.P[n, b, : ens.n_pop]
            gH = _grad_x_hamiltonian(spec, t, x, MeasureArg(mu.mean[0], mu.second_moment[0]),
                                     ens.alpha[n, b, : ens.n_pop], p, qhat, i)
            r = p - ens.P[n + 1, b, : ens.n_pop] - dt * gH + np.einsum("...ij,...j->...i", qhat, ens.dW[n, b, : ens.n_pop])
            nxt = n + 1
            for j in range(s0):
                if j == i:
                    continue
                jumps = float(np.sum((prev[:-1] == i) & (prev[1:] == j)))
                dM = jumps - q[i, j] * dt
                if dM == 0.0:
                    continue
                lam = field.at_node(nxt, x1, m1, j) - field.at_node(nxt, x1, m1, i)
                r = r + lam * dM
            total += float(np.sum(r**2))
            count += r.shape[0]
    return total / count


# --------------------------------------------------------------------------- I/O


def write_field(field: DecouplingField, path) -> None:
    """Textual export: one header line, then a long-format CSV of fit parameters."""
    N = len(field.grid)
    with open(Path(path), "w", newline="") as fh:
        fh.write(f"{FIELD_HEADER} dim={field.dim} regimes={field.n_regimes} nodes={N} "
                 f"horizon={field.horizon!r} degree={field.degree}\n")
        w = csv.writer(fh)
        w.writerow(["node", "regime", "t", "degree", "mdegree", "uses_mean", "kind", "index",
                    "component", "value"])
        for n in range(N):
            t = repr(float(field.grid[n]))
            for i in range(field.n_regimes):
                fit = field.fits[n][i]
                head = [n, i, t, fit.degree, fit.mdegree, int(fit.uses_mean)]
                for k, v in enumerate(fit.shift):
                    w.writerow(head + ["shift", k, 0, repr(float(v))])
                for k, v in enumerate(fit.scale):
                    w.writerow(head + ["scale", k, 0, repr(float(v))])
                for k in range(fit.coef.shape[0]):
                    for c in range(fit.coef.shape[1]):
                        w.writerow(head + ["coef", k, c, repr(float(fit.coef[k, c]))])


def read_field(path) -> DecouplingField:
    text = Path(path).read_text()
    header, _, body = text.partition("\n")
    if not header.startswith(FIELD_HEADER):
        raise ValueError(f"not a field file (header {header[:40]!r})")
    meta = dict(kv.split("=") for kv in header[len(FIELD_HEADER):].split())
    d, s0, N = int(meta["dim"]), int(meta["regimes"]), int(meta["nodes"])
    grid = np.empty(N)
    parts: dict = {}
    for row in csv.DictReader(io.StringIO(body)):
        n, i = int(row["node"]), int(row["regime"])
        grid[n] = float(row["t"])
        rec = parts.setdefault((n, i), {"degree": int(row["degree"]), "mdegree": int(row["mdegree"]),
                                        "uses_mean": bool(int(row["uses_mean"])),
                                        "shift": {}, "scale": {}, "coef": {}})
        key = (int(row["index"]), int(row["component"]))
        rec[row["kind"]][key] = float(row["value"])
    fits = []
    for n in range(N):
        row = []
        for i in range(s0):
            rec = parts[(n, i)]
            nvar = len(rec["shift"])
            shift = np.array([rec["shift"][(k, 0)] for k in range(nvar)])
            scale = np.array([rec["scale"][(k, 0)] for k in range(nvar)])
            nb = max(k for k, _ in rec["coef"]) + 1
            coef = np.array([[rec["coef"][(k, c)] for c in range(d)] for k in range(nb)])
            row.append(NodeFit(shift, scale, coef, rec["degree"], rec["mdegree"], rec["uses_mean"]))
        fits.append(row)
    return DecouplingField(grid, fits, d, int(meta["degree"]))


def write_picard_csv(report: PicardReport, path, timings: bool = True) -> None:
    """Per-iteration change and law drift; ``timings=False`` drops the wall-clock column."""
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "change", "law_drift"] + (["wall_clock"] if timings else []))
        for k, (c, l, s) in enumerate(zip(report.change, report.law_drift, report.wall_clock), 1):
            w.writerow([k, repr(c), repr(l)] + ([repr(s)] if timings else []))
