"""Riccati ground truth for the regime-switching LQ mean-field game.

With ``A = b1``, ``C = c``, ``S = b2 R^{-1} b2'`` and the ansatz
``P = K(t,i) x + L(t,i) m + k(t,i)`` (``m`` the mean conditional on the
regime path), matching drift terms of the adjoint equation gives, per regime ``i``::

    K' = -(K A + A'K - K S K + Qx + sum_j q_ij K_j),                 K(T) = G
    L' = -(K (C - S L) + L (A + C - S (K + L)) + A'L - s Qx
           + sum_j q_ij L_j),                                        L(T) = -sg G
    k' = -((A' - (K + L) S) k + sum_j q_ij k_j),                     k(T) = 0
    c0' = -(tr(sigma sigma' K) / 2 + sum_j q_ij c0_j),               c0(T) = 0

``c0`` is the value offset: for the uncoupled case (``s = sg = 0``, ``C = 0``)
the value function is ``x'Kx/2 + c0``. The conditional law along a regime path
is Gaussian with mean ``dm = ((A + C - S(K + L)) m - S k) dt`` and covariance
``V' = (A - S K) V + V (A - S K)' + sigma sigma'``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .game_model import LqParams, TimeOutOfRange
from .regime_chain import GeneratorMatrix, RegimePath

__all__ = [
    "BlowUp",
    "AsymmetryDrift",
    "RiccatiSolution",
    "MeanFlow",
    "solve_riccati",
    "riccati_rhs",
    "riccati_residual",
    "decoupling_field_lq",
    "mean_flow_lq",
    "discrete_limit_law",
    "write_riccati_csv",
]

BLOWUP_NORM = 1e8
LOCAL_TOL = 1e-8
ASYM_TOL = 1e-8


class BlowUp(RuntimeError):
    pass


class AsymmetryDrift(RuntimeError):
    pass


def _pack(K, L, k, c0):
    s0 = K.shape[0]
    return np.concatenate([K.reshape(s0, -1), L.reshape(s0, -1), k, c0[:, None]], axis=1)


def _unpack(y, d):
    dd = d * d
    return (y[:, :dd].reshape(-1, d, d), y[:, dd:2 * dd].reshape(-1, d, d),
            y[:, 2 * dd:2 * dd + d], y[:, -1])


def riccati_rhs(params: LqParams, Q: GeneratorMatrix, y: np.ndarray) -> np.ndarray:
    """Time derivative of the packed state ``(K, L, k, c0)`` for all regimes."""
    d = params.dim_state
    K, L, k, c0 = _unpack(y, d)
    A, C, Qx, S = params.b1, params.c, params.Qx, params.control_gain()
    At = np.swapaxes(A, 1, 2)
    q = Q.rates
    cK = np.einsum("ij,jab->iab", q, K)
    cL = np.einsum("ij,jab->iab", q, L)
    ck = q @ k
    cc = q @ c0
    KS = K @ S
    dK = -(K @ A + At @ K - KS @ K + Qx + cK)
    KL = K + L
    dL = -(K @ (C - S @ L) + L @ (A + C - S @ KL) + At @ L - params.s[:, None, None] * Qx + cL)
    dk = -(np.einsum("iab,ib->ia", At - KL @ S, k) + ck)
    sig2 = params.sigma @ np.swapaxes(params.sigma, 1, 2)
    dc = -(0.5 * np.einsum("iab,iba->i", sig2, K) + cc)
    return _pack(dK, dL, dk, dc)


def _rk4(fun, y, h):
    k1 = fun(y)
    k2 = fun(y + 0.5 * h * k1)
    k3 = fun(y + 0.5 * h * k2)
    k4 = fun(y + h * k3)
    return y + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


@dataclass(frozen=True)
class RiccatiSolution:
    """Riccati coefficients on a time grid, interpolated by cubic Hermite in time."""

    grid: np.ndarray
    K: np.ndarray  # (n, s0, d, d)
    L: np.ndarray
    k: np.ndarray  # (n, s0, d)
    c0: np.ndarray  # (n, s0)
    dy: np.ndarray  # packed derivatives at nodes, for interpolation
    params: LqParams
    generator: GeneratorMatrix
    max_local_error: float
    substeps: int

    @property
    def horizon(self) -> float:
        return float(self.grid[-1])

    def _packed(self) -> np.ndarray:
        return np.stack([_pack(self.K[n], self.L[n], self.k[n], self.c0[n]) for n in range(len(self.grid))])

    def interpolate(self, t: float, derivative: bool = False):
        """Packed state (or its time derivative) at ``t`` for every regime."""
        g = self.grid
        if not g[0] - 1e-12 <= t <= g[-1] + 1e-12:
            raise TimeOutOfRange(f"t={t} outside [{g[0]}, {g[-1]}]")
        n = int(np.clip(np.searchsorted(g, t, side="right") - 1, 0, len(g) - 2))
        h = g[n + 1] - g[n]
        s = (t - g[n]) / h
        y = self._packed_cache()
        y0, y1, d0, d1 = y[n], y[n + 1], self.dy[n], self.dy[n + 1]
        if derivative:
            return ((6 * s * s - 6 * s) * (y0 - y1) / h + (3 * s * s - 4 * s + 1) * d0
                    + (3 * s * s - 2 * s) * d1)
        h00 = 2 * s**3 - 3 * s**2 + 1
        h10 = s**3 - 2 * s**2 + s
        h01 = -2 * s**3 + 3 * s**2
        h11 = s**3 - s**2
        return h00 * y0 + h10 * h * d0 + h01 * y1 + h11 * h * d1

    def _packed_cache(self) -> np.ndarray:
        cache = self.__dict__.get("_y")
        if cache is None:
            cache = self._packed()
            object.__setattr__(self, "_y", cache)
        return cache

    def coefficients(self, t: float):
        """``(K, L, k, c0)`` at time ``t``, each stacked over regimes."""
        K, L, k, c0 = _unpack(self.interpolate(t), self.params.dim_state)
        return 0.5 * (K + np.swapaxes(K, 1, 2)), L, k, c0


def solve_riccati(params: LqParams, Q: GeneratorMatrix, grid) -> RiccatiSolution:
    """Backward RK4 from the horizon with step-doubling error control per grid step.

    Each grid interval is split into ``2^r`` RK4 substeps, with ``r`` raised
    until the Richardson estimate of the local error is at most ``1e-8``.
    """
    grid = np.asarray(grid, dtype=float)
    if isinstance(grid, np.ndarray) and grid.ndim == 0:
        raise ValueError("grid must be an array of times")
    if grid[0] != 0 or np.any(np.diff(grid) <= 0):
        raise ValueError("grid must start at 0 and increase strictly")
    T = grid[-1]
    if np.max(np.diff(grid)) > T / 200 * (1 + 1e-9):
        raise ValueError("grid step must be at most T/200")
    if params.n_regimes != Q.states:
        raise ValueError("params and generator disagree on the number of regimes")
    d, s0 = params.dim_state, params.n_regimes

    def fun(y):
        return riccati_rhs(params, Q, y)

    y = _pack(params.G.copy(), -params.sg[:, None, None] * params.G, np.zeros((s0, d)), np.zeros(s0))
    ys = [y]
    max_err = 0.0
    max_sub = 1
    for n in range(len(grid) - 1, 0, -1):
        h = -(grid[n] - grid[n - 1])
        r = 0
        while True:
            m = 2**r
            coarse = y
            for _ in range(m):
                coarse = _rk4(fun, coarse, h / m)
            fine = y
            for _ in range(2 * m):
                fine = _rk4(fun, fine, h / (2 * m))
            err = float(np.max(np.abs(fine - coarse))) / 15.0
            if err <= LOCAL_TOL or r >= 12:
                break
            r += 1
        y = fine + (fine - coarse) / 15.0 if err > LOCAL_TOL else fine
        max_err = max(max_err, err)
        max_sub = max(max_sub, 2 * m)
        K = y[:, : d * d].reshape(s0, d, d)
        asym = float(np.max(np.abs(K - np.swapaxes(K, 1, 2))))
        if asym > ASYM_TOL:
            raise AsymmetryDrift(f"K asymmetry {asym:.3e} at t={grid[n - 1]}")
        y[:, : d * d] = (0.5 * (K + np.swapaxes(K, 1, 2))).reshape(s0, -1)
        if not np.all(np.isfinite(y)) or np.max(np.abs(K)) > BLOWUP_NORM:
            raise BlowUp(f"|K| exceeded {BLOWUP_NORM:g} at t={grid[n - 1]}")
        ys.append(y.copy())
    ys = np.stack(ys[::-1])
    K, L, k, c0 = zip(*(_unpack(yy, d) for yy in ys))
    dy = np.stack([fun(yy) for yy in ys])
    return RiccatiSolution(grid.copy(), np.stack(K), np.stack(L), np.stack(k), np.stack(c0), dy,
                           params, Q, max_err, max_sub)


def riccati_residual(sol: RiccatiSolution) -> float:
    """Max defect of the interpolated solution in the ODE at interval midpoints."""
    worst = 0.0
    for n in range(len(sol.grid) - 1):
        t = 0.5 * (sol.grid[n] + sol.grid[n + 1])
        lhs = sol.interpolate(t, derivative=True)
        rhs = riccati_rhs(sol.params, sol.generator, sol.interpolate(t))
        worst = max(worst, float(np.max(np.abs(lhs - rhs))))
    return worst


def decoupling_field_lq(sol: RiccatiSolution, t: float, x, xbar, i: int) -> np.ndarray:
    """``p = K x + L xbar + k`` at time ``t`` in regime ``i``; batched over ``x``."""
    i = sol.generator.check_regime(i)
    K, L, k, _ = sol.coefficients(t)
    x = np.asarray(x, dtype=float)
    xbar = np.asarray(xbar, dtype=float)
    return x @ K[i].T + xbar @ L[i].T + k[i]


@dataclass(frozen=True)
class MeanFlow:
    """Conditional mean and covariance of the equilibrium state along one regime path."""

    times: np.ndarray
    mean: np.ndarray  # (n, d)
    cov: np.ndarray  # (n, d, d)
    regimes: np.ndarray

    def at(self, t):
        """Linear interpolation of the mean (the step is at most 1e-3)."""
        return np.stack([np.interp(t, self.times, self.mean[:, j]) for j in range(self.mean.shape[1])], axis=-1)


def _mean_cov_rhs(sol, params, t, i, m, V):
    K, L, k, _ = sol.coefficients(t)
    S = params.control_gain()[i]
    A, C = params.b1[i], params.c[i]
    dm = (A + C - S @ (K[i] + L[i])) @ m - S @ k[i]
    F = A - S @ K[i]
    sig = params.sigma[i]
    dV = F @ V + V @ F.T + sig @ sig.T
    return dm, dV


def mean_flow_lq(sol: RiccatiSolution, params: LqParams, Q: GeneratorMatrix, path: RegimePath,
                 x0, max_step: float = 1e-3) -> MeanFlow:
    """RK4 integration of the conditional mean and covariance between jumps of ``path``."""
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    d = params.dim_state
    T = min(path.horizon, sol.horizon)
    m = x0.copy()
    V = np.zeros((d, d))
    times, means, covs, regs = [0.0], [m.copy()], [V.copy()], [path.initial_state]
    for a, b, i in path.segments():
        b = min(b, T)
        if b <= a:
            continue
        n = max(1, int(np.ceil((b - a) / max_step - 1e-9)))
        h = (b - a) / n
        t = a
        for _ in range(n):
            k1 = _mean_cov_rhs(sol, params, t, i, m, V)
            k2 = _mean_cov_rhs(sol, params, t + h / 2, i, m + h / 2 * k1[0], V + h / 2 * k1[1])
            k3 = _mean_cov_rhs(sol, params, t + h / 2, i, m + h / 2 * k2[0], V + h / 2 * k2[1])
            k4 = _mean_cov_rhs(sol, params, t + h, i, m + h * k3[0], V + h * k3[1])
            m = m + h / 6 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
            V = V + h / 6 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
            t += h
            times.append(t)
            means.append(m.copy())
            covs.append(0.5 * (V + V.T))
            regs.append(i)
    return MeanFlow(np.array(times), np.array(means), np.array(covs), np.array(regs))


def discrete_limit_law(sol: RiccatiSolution, params: LqParams, node_regimes, x0, dt: float):
    """Mean and covariance of the Euler scheme for the limit dynamics on a uniform grid.

    ``node_regimes[n]`` is the regime held over ``[t_n, t_n + dt)``; a second
    axis runs over independent regime paths. This is the exact law of the
    time-discretised equilibrium state, so particle systems run with the same
    step can be compared to it without time-bias.

    Returns ``means`` of shape ``(n_t+1, [paths,] d)`` and ``covs`` of shape
    ``(n_t+1, [paths,] d, d)``.
    """
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    d = params.dim_state
    regs = np.asarray(node_regimes, dtype=int)
    single = regs.ndim == 1
    regs = regs.reshape(len(regs), -1)
    n_steps, R = regs.shape
    S = params.control_gain()
    eye = np.eye(d)
    means = np.empty((n_steps + 1, R, d))
    covs = np.empty((n_steps + 1, R, d, d))
    m = np.broadcast_to(x0, (R, d)).copy()
    V = np.zeros((R, d, d))
    means[0], covs[0] = m, V
    SS = params.sigma @ np.swapaxes(params.sigma, 1, 2)
    for n in range(n_steps):
        K, L, k, _ = sol.coefficients(min(n * dt, sol.horizon))
        M = eye + dt * (params.b1 + params.c - S @ (K + L))
        F = eye + dt * (params.b1 - S @ K)
        shift = dt * np.einsum("sij,sj->si", S, k)
        i = regs[n]
        m = np.einsum("rij,rj->ri", M[i], m) - shift[i]
        V = F[i] @ V @ np.swapaxes(F[i], 1, 2) + dt * SS[i]
        means[n + 1], covs[n + 1] = m, V
    if single:
        return means[:, 0], covs[:, 0]
    return means, covs


def write_riccati_csv(sol: RiccatiSolution, path) -> None:
    d = sol.params.dim_state
    idx = [f"{a}{b}" for a in range(d) for b in range(d)]
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "regime"] + [f"K{c}" for c in idx] + [f"L{c}" for c in idx]
                   + [f"k{a}" for a in range(d)])
        for n, t in enumerate(sol.grid):
            for i in range(sol.generator.states):
                row = [repr(float(t)), i]
                row += [repr(float(v)) for v in sol.K[n, i].ravel()]
                row += [repr(float(v)) for v in sol.L[n, i].ravel()]
                row += [repr(float(v)) for v in sol.k[n, i]]
                w.writerow(row)
