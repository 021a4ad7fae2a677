"""Finite-state continuous-time Markov chain acting as common noise.

Regimes are indexed ``0 .. s0-1``. Paths are stored as exact jump times, so
the state at any time is a binary search away and no grid bias enters the
common noise.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rng import stream

__all__ = [
    "GeneratorError",
    "NegativeOffDiagonal",
    "RowSumNonzero",
    "RateBoundExceeded",
    "GridOutOfRange",
    "RegimeOutOfRange",
    "GeneratorMatrix",
    "RegimePath",
    "MartingaleLedger",
    "validate_generator",
    "sample_path",
    "sample_paths",
    "martingale_ledger",
    "occupation_times",
    "stationary_distribution",
    "write_ledger_csv",
]

ROW_SUM_TOL = 1e-12


class GeneratorError(ValueError):
    pass


class NegativeOffDiagonal(GeneratorError):
    pass


class RowSumNonzero(GeneratorError):
    pass


class RateBoundExceeded(GeneratorError):
    pass


class GridOutOfRange(ValueError):
    pass


class RegimeOutOfRange(IndexError):
    pass


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class GeneratorMatrix:
    """Validated generator ``Q``: nonnegative off-diagonal rates, zero row sums."""

    rates: np.ndarray
    rate_bound: float = np.inf

    @property
    def states(self) -> int:
        return self.rates.shape[0]

    def exit_rate(self, i: int) -> float:
        return -float(self.rates[i, i])

    def check_regime(self, i: int) -> int:
        if not 0 <= int(i) < self.states:
            raise RegimeOutOfRange(f"regime {i} outside 0..{self.states - 1}")
        return int(i)


def validate_generator(raw_matrix, rate_bound: float | None = None) -> GeneratorMatrix:
    """Check a raw rate matrix and return a :class:`GeneratorMatrix`.

    Row sums within ``1e-12`` of zero are corrected by resetting the diagonal
    to minus the off-diagonal sum; anything larger is rejected.
    """
    q = np.array(raw_matrix, dtype=float)
    if q.ndim != 2 or q.shape[0] != q.shape[1] or q.shape[0] < 1:
        raise GeneratorError(f"generator must be a nonempty square matrix, got shape {q.shape}")
    if not np.all(np.isfinite(q)):
        raise GeneratorError("generator has non-finite entries")
    off = q.copy()
    np.fill_diagonal(off, 0.0)
    neg = np.argwhere(off < 0)
    if len(neg):
        i, j = neg[0]
        raise NegativeOffDiagonal(f"q[{i},{j}] = {q[i, j]} < 0")
    sums = q.sum(axis=1)
    bad = np.flatnonzero(np.abs(sums) > ROW_SUM_TOL)
    if len(bad):
        raise RowSumNonzero(f"row {bad[0]} sums to {sums[bad[0]]}")
    bound = np.inf if rate_bound is None else float(rate_bound)
    if np.any(off > bound):
        i, j = np.argwhere(off > bound)[0]
        raise RateBoundExceeded(f"q[{i},{j}] = {q[i, j]} exceeds declared bound {bound}")
    np.fill_diagonal(q, -off.sum(axis=1))
    return GeneratorMatrix(_readonly(q), bound)


def stationary_distribution(Q: GeneratorMatrix) -> np.ndarray:
    """Solve ``pi Q = 0, sum(pi) = 1`` by least squares (exact for irreducible chains)."""
    s = Q.states
    a = np.vstack([Q.rates.T, np.ones((1, s))])
    rhs = np.zeros(s + 1)
    rhs[-1] = 1.0
    pi, *_ = np.linalg.lstsq(a, rhs, rcond=None)
    return pi


@dataclass(frozen=True)
class RegimePath:
    """One càdlàg trajectory on ``[0, horizon]``.

    ``jump_times[k]`` is when the chain enters ``states[k]``.
    """

    initial_state: int
    jump_times: np.ndarray
    states: np.ndarray
    horizon: float

    def __post_init__(self):
        jt = np.asarray(self.jump_times, dtype=float)
        st = np.asarray(self.states, dtype=int)
        if jt.shape != st.shape:
            raise ValueError("jump_times and states must have equal length")
        if len(jt):
            if np.any(np.diff(jt) <= 0):
                raise ValueError("jump times must be strictly increasing")
            if jt[0] <= 0 or jt[-1] > self.horizon:
                raise ValueError("jump times must lie in (0, horizon]")
            prev = np.concatenate([[self.initial_state], st[:-1]])
            if np.any(prev == st):
                raise ValueError("a jump must change the state")
        jt.setflags(write=False)
        st = st.copy()
        st.setflags(write=False)
        object.__setattr__(self, "jump_times", jt)
        object.__setattr__(self, "states", st)

    @property
    def n_jumps(self) -> int:
        return len(self.jump_times)

    def _all_states(self) -> np.ndarray:
        return np.concatenate([[self.initial_state], self.states])

    def state_at(self, t):
        """Right-continuous value ``I_t``."""
        idx = np.searchsorted(self.jump_times, t, side="right")
        return self._all_states()[idx]

    def state_before(self, t):
        """Left limit ``I_{t-}`` (equals ``I_0`` at ``t = 0``)."""
        idx = np.searchsorted(self.jump_times, t, side="left")
        return self._all_states()[idx]

    def segments(self):
        """Yield ``(start, end, state)`` for each constant piece."""
        bounds = np.concatenate([[0.0], self.jump_times, [self.horizon]])
        for k, s in enumerate(self._all_states()):
            if bounds[k + 1] > bounds[k] or k == 0:
                yield float(bounds[k]), float(bounds[k + 1]), int(s)


def sample_path(Q: GeneratorMatrix, i0: int, T: float, rng: np.random.Generator) -> RegimePath:
    """Exact jump-time simulation truncated at ``T``."""
    if not T > 0:
        raise ValueError("horizon must be positive")
    i = Q.check_regime(i0)
    rates = Q.rates
    t = 0.0
    times, states = [], []
    while True:
        exit_rate = -rates[i, i]
        if exit_rate <= 0:
            break
        t += rng.exponential(1.0 / exit_rate)
        if t > T:
            break
        w = rates[i].copy()
        w[i] = 0.0
        j = int(rng.choice(len(w), p=w / w.sum()))
        times.append(t)
        states.append(j)
        i = j
    return RegimePath(int(i0), np.array(times), np.array(states, dtype=int), float(T))


def sample_paths(Q: GeneratorMatrix, i0: int, T: float, seed: int, n: int,
                 tag: str = "regime", start: int = 0) -> list[RegimePath]:
    """Paths ``start .. start+n-1``, each from its own derived stream."""
    return [sample_path(Q, i0, T, stream(seed, tag, k)) for k in range(start, start + n)]


def occupation_times(path: RegimePath, s0: int | None = None, until: float | None = None) -> np.ndarray:
    """Time spent in each state over ``[0, until]`` (default: whole horizon)."""
    s0 = (max(path._all_states()) + 1) if s0 is None else s0
    end = path.horizon if until is None else float(until)
    out = np.zeros(s0)
    for a, b, s in path.segments():
        if a >= end:
            break
        out[s] += min(b, end) - a
    return out


@dataclass(frozen=True)
class MartingaleLedger:
    """``[M_ij]``, ``<M_ij>`` and ``M_ij`` on a time grid, indexed ``[i, j, k]``."""

    grid: np.ndarray
    bracket: np.ndarray
    compensator: np.ndarray
    martingale: np.ndarray = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "martingale", self.bracket - self.compensator)


def martingale_ledger(path: RegimePath, Q: GeneratorMatrix, grid) -> MartingaleLedger:
    """Exact counting processes and compensators at the grid times.

    The compensator is ``q_ij`` times the occupation of ``i`` up to ``t``,
    which is piecewise linear between jumps and evaluated in closed form.
    """
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1:
        raise ValueError("grid must be one-dimensional")
    if len(grid) and (grid[0] < 0 or grid[-1] > path.horizon or np.any(np.diff(grid) < 0)):
        raise GridOutOfRange("grid must be sorted inside [0, horizon]")
    s0 = Q.states
    bracket = np.zeros((s0, s0, len(grid)))
    occ = np.zeros((s0, len(grid)))
    prev = path.initial_state
    for tj, sj in zip(path.jump_times, path.states):
        bracket[prev, sj] += grid >= tj
        prev = sj
    for a, b, s in path.segments():
        occ[s] += np.clip(grid, a, b) - a
    off = Q.rates.copy()
    np.fill_diagonal(off, 0.0)
    comp = off[:, :, None] * occ[:, None, :]
    return MartingaleLedger(grid.copy(), bracket, comp)


def write_ledger_csv(ledger: MartingaleLedger, path) -> None:
    s0 = ledger.bracket.shape[0]
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "pair", "bracket", "compensator", "martingale"])
        for k, t in enumerate(ledger.grid):
            for i in range(s0):
                for j in range(s0):
                    if i == j:
                        continue
                    w.writerow([repr(float(t)), f"{i}-{j}", repr(float(ledger.bracket[i, j, k])),
                                repr(float(ledger.compensator[i, j, k])),
                                repr(float(ledger.martingale[i, j, k]))])
