"""Finite differences for the coupled Nash-HJB system with regime switching (N <= 2, d = 1).

Player ``k`` has state ``x_k`` and sees the other players through the
empirical measure of their states (its own state when alone). For player ``i``
in regime ``i0`` the backward equation is::

    v_t + sum_k [ b(x_k, mu_k, a_k) d_k v + sigma(x_k)^2/2 d_kk v ] + f(x_i, mu_i, a_i)
        + sum_j q_{i0 j} (v(j) - v(i0)) = 0,       v(T) = g(x_i, mu_i)

with ``a_k`` the Hamiltonian minimiser at ``p = d_k v_k``. Each time step is
a policy iteration: freeze the controls from the current gradients, then solve
with implicit diffusion, explicit advection on the later time level (central
where the cell Peclet number allows, upwind otherwise) and explicit regime
coupling.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .game_model import GameSpec, MeasureArg
from .hamiltonian import alpha_hat

__all__ = [
    "CFLViolation",
    "PolicyNonconvergence",
    "GridParams",
    "ValueGrid",
    "FeedbackGrid",
    "solve_nash_system",
    "feedback_from_values",
    "pde_residual",
    "write_value_csv",
]

INNER_TOL = 1e-8
MAX_INNER = 50
MAX_HALVINGS = 8


class CFLViolation(RuntimeError):
    pass


class PolicyNonconvergence(RuntimeError):
    pass


@dataclass(frozen=True)
class GridParams:
    n_x: int = 201
    n_t: int = 400
    padding: float = 6.0
    max_inner: int = MAX_INNER
    inner_tol: float = INNER_TOL
    store_every: int | None = None  # default: every node for one player, ~40 slices for two
    x_range: tuple[float, float] | None = None


@dataclass
class ValueGrid:
    """Values ``v[k, i, player, regime, x...]`` at the stored time indices ``time_index[k]``."""

    times: np.ndarray
    x: np.ndarray
    n_players: int
    time_index: np.ndarray
    values: np.ndarray
    substeps: int = 1
    boundary: str = "zero second derivative (one-sided, second order)"
    inner_iterations: list = field(default_factory=list)

    def slice_at(self, n: int) -> np.ndarray:
        k = np.flatnonzero(self.time_index == n)
        if not len(k):
            raise KeyError(f"time index {n} not stored")
        return self.values[k[0]]

    @property
    def dx(self) -> float:
        return float(self.x[1] - self.x[0])

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])

    def inner_mask(self) -> np.ndarray:
        lo, hi = self.x[0], self.x[-1]
        q = 0.25 * (hi - lo)
        return (self.x >= lo + q - 1e-12) & (self.x <= hi - q + 1e-12)


@dataclass
class FeedbackGrid:
    times: np.ndarray
    time_index: np.ndarray
    alpha: np.ndarray  # [k, player, regime, x..., m]
    gradient_bound: float


def _state_grids(x: np.ndarray, n_players: int) -> list[np.ndarray]:
    """Coordinate arrays of shape ``(n_x,) * N + (1,)`` for each player."""
    mesh = np.meshgrid(*([x] * n_players), indexing="ij")
    return [g[..., None] for g in mesh]


def _others_measure(xs: list[np.ndarray], k: int) -> MeasureArg:
    others = [xs[j] for j in range(len(xs)) if j != k] or [xs[k]]
    pts = np.stack(others, axis=-2)  # [..., N-1, d]
    mean = pts.mean(axis=-2)
    m2 = np.mean(np.sum(pts**2, axis=-1), axis=-1)
    return MeasureArg(mean, m2)


def _gradient(v: np.ndarray, axis: int, dx: float) -> np.ndarray:
    """Central difference inside, second-order one-sided at the ends."""
    g = np.empty_like(v)
    vm = np.moveaxis(v, axis, 0)
    gm = np.moveaxis(g, axis, 0)
    gm[1:-1] = (vm[2:] - vm[:-2]) / (2 * dx)
    gm[0] = (-3 * vm[0] + 4 * vm[1] - vm[2]) / (2 * dx)
    gm[-1] = (3 * vm[-1] - 4 * vm[-2] + vm[-3]) / (2 * dx)
    return g


def _stencil(b: np.ndarray, diff: np.ndarray, dx: float) -> np.ndarray:
    """Per node: 0 central (cell Peclet ``|b| dx / diff <= 2``), +1 forward, -1 backward."""
    peclet = np.abs(b) * dx / np.maximum(diff, 1e-300)
    return np.where(peclet <= 2.0, 0, np.where(b > 0, 1, -1)).astype(np.int8)


def _advection(v: np.ndarray, b: np.ndarray, stencil: np.ndarray, axis: int, dx: float) -> np.ndarray:
    """``b d v`` along ``axis`` with a stencil choice fixed beforehand.

    The choice is frozen for the whole policy iteration of a time step; letting
    it follow the iterate makes the fixed-point map discontinuous and it cycles.
    """
    vm = np.moveaxis(v, axis, 0)
    bm = np.moveaxis(b, axis, 0)
    sm = np.moveaxis(stencil, axis, 0)[1:-1]
    out = np.zeros_like(vm)
    fwd = (vm[2:] - vm[1:-1]) / dx
    bwd = (vm[1:-1] - vm[:-2]) / dx
    deriv = np.where(sm == 0, 0.5 * (fwd + bwd), np.where(sm > 0, fwd, bwd))
    out[1:-1] = bm[1:-1] * deriv
    return np.moveaxis(out, 0, axis)


def _interior(shape) -> np.ndarray:
    mask = np.ones(shape, dtype=bool)
    for ax in range(len(shape)):
        idx = [slice(None)] * len(shape)
        idx[ax] = 0
        mask[tuple(idx)] = False
        idx[ax] = -1
        mask[tuple(idx)] = False
    return mask


def _system_matrix(diffs: list[np.ndarray], dx: float, dt: float) -> sp.csc_matrix:
    """``I - dt * sum_k diff_k d_kk`` inside; extrapolation rows ``2v0 - 5v1 + 4v2 - v3 = 0`` at the edge."""
    shape = diffs[0].shape
    n = int(np.prod(shape))
    idx = np.arange(n).reshape(shape)
    rows, cols, vals = [], [], []
    inner = _interior(shape)
    flat_inner = idx[inner]
    rows.append(flat_inner)
    cols.append(flat_inner)
    vals.append(np.ones(len(flat_inner)))
    for ax, dk in enumerate(diffs):
        c = dt * dk[inner] / dx**2
        strides = [0] * len(shape)
        strides[ax] = 1
        step = int(np.ravel_multi_index(tuple(strides), shape)) if len(shape) > 1 else 1
        rows += [flat_inner, flat_inner, flat_inner]
        cols += [flat_inner, flat_inner - step, flat_inner + step]
        vals += [2 * c, -c, -c]
    # boundary rows: pick the first axis on which the node sits at an end
    for flat in idx[~inner]:
        pos = np.unravel_index(flat, shape)
        for ax in range(len(shape)):
            if pos[ax] in (0, shape[ax] - 1):
                sgn = 1 if pos[ax] == 0 else -1
                nbr = []
                for o in range(4):
                    p = list(pos)
                    p[ax] += sgn * o
                    nbr.append(int(np.ravel_multi_index(tuple(p), shape)))
                rows.append(np.full(4, flat))
                cols.append(np.array(nbr))
                vals.append(np.array([2.0, -5.0, 4.0, -1.0]))
                break
    A = sp.csc_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))
    return A


def _domain(spec: GameSpec, params: GridParams) -> np.ndarray:
    if params.x_range is not None:
        lo, hi = params.x_range
        return np.linspace(lo, hi, params.n_x)
    x0 = float(spec.x0[0])
    T = spec.horizon
    mu = MeasureArg.dirac(spec.x0)
    sig_max, drift = 0.0, 0.0
    for i in range(spec.n_regimes):
        s = np.atleast_2d(spec.sigma(0.0, spec.x0, mu, i))
        sig_max = max(sig_max, float(np.linalg.norm(s, 2)))
        b = spec.drift(0.0, spec.x0, mu, np.zeros(spec.dim_control), i)
        drift = max(drift, float(np.max(np.abs(b))) * T)
    half = params.padding * (sig_max * np.sqrt(T) + drift)
    return np.linspace(x0 - half, x0 + half, params.n_x)


def _controls(spec, t, xs, mus, V, dx, i0):
    """Minimisers for every player at regime ``i0`` from the gradients of their own values."""
    out = []
    for k in range(len(xs)):
        p = _gradient(V[k, i0], k, dx)[..., None]
        out.append(alpha_hat(spec, t, xs[k], mus[k], p, i0))
    return out


def solve_nash_system(spec: GameSpec, n_players: int = 1, params: GridParams | None = None) -> ValueGrid:
    """Backward time stepping with Howard policy iteration at every step."""
    params = GridParams() if params is None else params
    if spec.dim_state != 1 or spec.dim_control != 1:
        raise ValueError("the grid solver handles d = m = 1 only")
    if n_players not in (1, 2):
        raise ValueError("the grid solver handles one or two players")
    N, s0 = n_players, spec.n_regimes
    x = _domain(spec, params)
    dx = float(x[1] - x[0])
    times = np.linspace(0.0, spec.horizon, params.n_t + 1)
    xs = _state_grids(x, N)
    mus = [_others_measure(xs, k) for k in range(N)]
    shape = (params.n_x,) * N
    q = spec.regimes.rates

    store_every = params.store_every or (1 if N == 1 else max(1, params.n_t // 40))
    keep = set(range(0, params.n_t + 1, store_every)) | {params.n_t}
    keep |= {n + o for n in list(keep) for o in (-1, 1) if 0 <= n + o <= params.n_t}
    time_index = np.array(sorted(keep))

    V = np.empty((N, s0) + shape)
    for k in range(N):
        for i0 in range(s0):
            V[k, i0] = spec.g(xs[k], mus[k], i0)
    stored = {params.n_t: V.copy()}

    def diffusivities(t, i0):
        out = []
        for k in range(N):
            s = spec.sigma(t, xs[k], mus[k], i0)[..., 0, 0]
            out.append(0.5 * s**2)
        return out

    # CFL: explicit advection and regime coupling on the substep
    dt_out = times[1] - times[0]
    substeps = 1
    V_probe = V
    bmax = 0.0
    for i0 in range(s0):
        ctrl = _controls(spec, times[-1], xs, mus, V_probe, dx, i0)
        for k in range(N):
            bmax = max(bmax, float(np.max(np.abs(spec.drift(times[-1], xs[k], mus[k], ctrl[k], i0)))))
    rate = float(np.max(-np.diag(q))) if s0 > 1 else 0.0
    while (dt_out / substeps) * (bmax / dx + rate) > 1.0:
        substeps *= 2
        if substeps > 2**MAX_HALVINGS:
            raise CFLViolation(f"dt={dt_out:g} needs more than {MAX_HALVINGS} halvings "
                               f"(max drift {bmax:g}, dx {dx:g})")
    dt = dt_out / substeps

    lu_cache: dict = {}
    inner_its = []
    interior = _interior(shape)
    V_later = None
    for n in range(params.n_t - 1, -1, -1):
        for sub in range(substeps - 1, -1, -1):
            t = times[n] + sub * dt
            V_next = V
            # warm start from linear extrapolation in time; the fixed point does not depend on it
            V_cur = V_next.copy() if V_later is None else 2.0 * V_next - V_later
            history: list[float] = []
            stencils = {}
            for i0 in range(s0):
                ctrl = _controls(spec, t, xs, mus, V_next, dx, i0)
                diffs = diffusivities(t, i0)
                stencils[i0] = [_stencil(spec.drift(t, xs[k], mus[k], ctrl[k], i0)[..., 0], diffs[k], dx)
                                for k in range(N)]
            for it in range(params.max_inner):
                V_new = np.empty_like(V_cur)
                for i0 in range(s0):
                    ctrl = _controls(spec, t, xs, mus, V_cur, dx, i0)
                    drifts = [spec.drift(t, xs[k], mus[k], ctrl[k], i0)[..., 0] for k in range(N)]
                    diffs = diffusivities(t, i0)
                    key = (i0, dt) if spec.sigma_constant else None
                    lu = lu_cache.get(key) if key is not None else None
                    if lu is None:
                        lu = splu(_system_matrix(diffs, dx, dt), permc_spec="MMD_AT_PLUS_A")
                        if key is not None:
                            lu_cache[key] = lu
                    rhs = np.empty((N,) + shape)
                    for pl in range(N):
                        vn = V_next[pl, i0]
                        adv = sum(_advection(vn, drifts[k], stencils[i0][k], k, dx) for k in range(N))
                        cost = spec.f(t, xs[pl], mus[pl], ctrl[pl], i0)
                        coup = sum(q[i0, j] * (V_next[pl, j] - vn) for j in range(s0) if j != i0)
                        rhs[pl] = np.where(interior, vn + dt * (adv + cost + coup), 0.0)
                    # all players share the matrix: one multi-column solve
                    sol = lu.solve(np.ascontiguousarray(rhs.reshape(N, -1).T))
                    V_new[:, i0] = sol.T.reshape((N,) + shape)
                delta = np.abs(V_new - V_cur)
                change = float(delta.max())
                history.append(change)
                V_cur = V_new
                if change <= params.inner_tol:
                    break
            else:
                where = np.unravel_index(int(delta.argmax()), delta.shape)
                raise PolicyNonconvergence(
                    f"policy iteration stalled at t={t:g}: last changes "
                    f"{', '.join(f'{c:.1e}' for c in history[-4:])} at index {tuple(map(int, where))}")
            inner_its.append(it + 1)
            V_later = V_next
            V = V_cur
            if not np.all(np.isfinite(V)):
                raise FloatingPointError(f"non-finite values at t={t:g}")
        if n in keep:
            stored[n] = V.copy()
    values = np.stack([stored[n] for n in time_index])
    return ValueGrid(times, x, N, time_index, values, substeps, inner_iterations=inner_its)


def feedback_from_values(values: ValueGrid, spec: GameSpec) -> FeedbackGrid:
    N, s0 = values.n_players, spec.n_regimes
    xs = _state_grids(values.x, N)
    mus = [_others_measure(xs, k) for k in range(N)]
    out = np.empty(values.values.shape + (spec.dim_control,))
    gmax, amax, g0max = 0.0, 0.0, 0.0
    for kk, n in enumerate(values.time_index):
        t = values.times[n]
        V = values.values[kk]
        for i0 in range(s0):
            for k in range(N):
                p = _gradient(V[k, i0], k, values.dx)[..., None]
                a = alpha_hat(spec, t, xs[k], mus[k], p, i0)
                out[kk, k, i0] = a
                gmax = max(gmax, float(np.max(np.abs(p))))
                amax = max(amax, float(np.max(np.abs(a))))
                a0 = alpha_hat(spec, t, xs[k], mus[k], np.zeros_like(p), i0)
                g0max = max(g0max, float(np.max(np.abs(a0))))
    bound = amax / (1.0 + gmax)
    return FeedbackGrid(values.times, values.time_index, out, bound)


def _d1(v, axis, dx):
    vm = np.moveaxis(v, axis, 0)
    out = (-vm[4:] + 8 * vm[3:-1] - 8 * vm[1:-3] + vm[:-4]) / (12 * dx)
    return np.moveaxis(out, 0, axis)


def _d2(v, axis, dx):
    vm = np.moveaxis(v, axis, 0)
    out = (-vm[4:] + 16 * vm[3:-1] - 30 * vm[2:-2] + 16 * vm[1:-3] - vm[:-4]) / (12 * dx**2)
    return np.moveaxis(out, 0, axis)


def _trim(a, N, axis_skip=None):
    """Drop two nodes at each end of every spatial axis (the last N axes)."""
    sl = [slice(None)] * (a.ndim - N) + [slice(2, -2)] * N
    if axis_skip is not None:
        sl[a.ndim - N + axis_skip] = slice(None)
    return a[tuple(sl)]


def pde_residual(values: ValueGrid, spec: GameSpec, sample_nodes=None) -> float:
    """RMS of ``v_t + G v + f`` on inner-domain nodes, fourth-order stencils in space.

    ``sample_nodes`` selects stored time indices with both neighbours stored
    (default: all of them); the time derivative is a central difference.
    """
    N, s0 = values.n_players, spec.n_regimes
    dx, dt = values.dx, values.dt
    xs = _state_grids(values.x, N)
    mus = [_others_measure(xs, k) for k in range(N)]
    stored = set(values.time_index.tolist())
    cand = [n for n in values.time_index if n - 1 in stored and n + 1 in stored]
    if sample_nodes is not None:
        cand = [n for n in cand if n in set(sample_nodes)]
    if not cand:
        raise ValueError("no stored time index has both neighbours stored")
    q = spec.regimes.rates
    inner1 = values.inner_mask()[2:-2]
    mask = inner1
    for _ in range(N - 1):
        mask = mask[..., None] & inner1
    total, count = 0.0, 0
    xs_t = [_trim(xk[..., 0], N) for xk in xs]
    for n in cand:
        t = values.times[n]
        V = values.slice_at(n)
        vt = (values.slice_at(n + 1) - values.slice_at(n - 1)) / (2 * dt)
        for i0 in range(s0):
            grads = [_trim(_d1(V[k, i0], k, dx), N, axis_skip=k) for k in range(N)]
            ctrl = []
            for k in range(N):
                mu_k = MeasureArg(_trim(mus[k].mean[..., 0], N)[..., None], _trim(mus[k].second_moment, N))
                ctrl.append((alpha_hat(spec, t, xs_t[k][..., None], mu_k, grads[k][..., None], i0), mu_k))
            for pl in range(N):
                r = _trim(vt[pl, i0], N)
                for k in range(N):
                    a, mu_k = ctrl[k]
                    b = spec.drift(t, xs_t[k][..., None], mu_k, a, i0)[..., 0]
                    s = spec.sigma(t, xs_t[k][..., None], mu_k, i0)[..., 0, 0]
                    dk = _trim(_d1(V[pl, i0], k, dx), N, axis_skip=k)
                    dkk = _trim(_d2(V[pl, i0], k, dx), N, axis_skip=k)
                    r = r + b * dk + 0.5 * s**2 * dkk
                a, mu_p = ctrl[pl]
                r = r + spec.f(t, xs_t[pl][..., None], mu_p, a, i0)
                for j in range(s0):
                    if j != i0:
                        r = r + q[i0, j] * _trim(V[pl, j] - V[pl, i0], N)
                total += float(np.sum(r[mask] ** 2))
                count += int(mask.sum())
    return float(np.sqrt(total / count))


def write_value_csv(values: ValueGrid, path) -> None:
    N = values.n_players
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"x{k}" for k in range(N)] + ["regime", "player", "value"])
        for kk, n in enumerate(values.time_index):
            t = repr(float(values.times[n]))
            V = values.values[kk]
            for idx in np.ndindex(*V.shape):
                pl, i0, *pos = idx
                w.writerow([t] + [repr(float(values.x[p])) for p in pos] + [i0, pl, repr(float(V[idx]))])
