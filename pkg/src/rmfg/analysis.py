"""Wasserstein-2 metrics in one dimension, the epsilon_N rate, log-log fits and chaos tables."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import ndtri
from scipy.stats import norm

__all__ = [
    "UnequalSizes",
    "NonPositiveValue",
    "wasserstein2_1d",
    "wasserstein2_quantile",
    "resample_to_common_size",
    "w2sq_to_gaussian",
    "epsilon_rate",
    "fit_loglog_slope",
    "ChaosRow",
    "ChaosTable",
    "write_chaos_csv",
    "chaos_sweep",
]


class UnequalSizes(ValueError):
    pass


class NonPositiveValue(ValueError):
    pass


def wasserstein2_1d(a, b) -> float:
    """Exact W2 between two equal-size, equal-weight samples: sorted (comonotone) pairing."""
    a = np.sort(np.asarray(a, dtype=float).ravel())
    b = np.sort(np.asarray(b, dtype=float).ravel())
    if a.size != b.size:
        raise UnequalSizes(f"sample sizes differ: {a.size} vs {b.size}")
    if a.size == 0:
        raise ValueError("samples must be nonempty")
    return float(np.sqrt(np.mean((a - b) ** 2)))


def wasserstein2_quantile(a, b) -> float:
    """Exact W2 between equal-weight samples of any sizes, by integrating quantile differences."""
    a = np.sort(np.asarray(a, dtype=float).ravel())
    b = np.sort(np.asarray(b, dtype=float).ravel())
    cuts = np.union1d(np.arange(a.size + 1) / a.size, np.arange(b.size + 1) / b.size)
    mid = 0.5 * (cuts[1:] + cuts[:-1])
    qa = a[np.minimum((mid * a.size).astype(int), a.size - 1)]
    qb = b[np.minimum((mid * b.size).astype(int), b.size - 1)]
    return float(np.sqrt(np.sum(np.diff(cuts) * (qa - qb) ** 2)))


def resample_to_common_size(a, b, rng: np.random.Generator, size: int | None = None):
    """Draw both samples with replacement to a common size (default: the smaller one)."""
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    n = min(a.size, b.size) if size is None else int(size)
    return rng.choice(a, n, replace=True), rng.choice(b, n, replace=True)


def w2sq_to_gaussian(sample, mean: float, std: float) -> float:
    """Exact squared W2 between an equal-weight sample and ``N(mean, std^2)``.

    The k-th order statistic is paired with the Gaussian quantile slab
    ``[k/n, (k+1)/n]``; first and second slab moments have closed forms.
    """
    x = np.sort(np.asarray(sample, dtype=float).ravel())
    n = x.size
    if std == 0.0:
        return float(np.mean((x - mean) ** 2))
    u = np.arange(n + 1) / n
    z = ndtri(u)
    phi = norm.pdf(z)
    phi[[0, -1]] = 0.0
    cdf = u
    zphi = np.zeros_like(z)
    inner = np.isfinite(z)
    zphi[inner] = z[inner] * phi[inner]
    i1 = phi[:-1] - phi[1:]  # integral of z over the slab in probability measure
    i2 = (cdf[1:] - zphi[1:]) - (cdf[:-1] - zphi[:-1])  # integral of z^2
    y1 = mean / n + std * i1
    y2 = mean**2 / n + 2 * mean * std * i1 + std**2 * i2
    return float(np.sum(x**2 / n - 2 * x * y1 + y2))


def epsilon_rate(N: int, d: int) -> float:
    """``N^{-1/max(d,4)} (1 + log(N) 1{d=4})^{1/2}``."""
    if N < 1 or d < 1:
        raise ValueError("N and d must be positive")
    base = N ** (-1.0 / max(d, 4))
    if d == 4:
        return base * math.sqrt(1.0 + math.log(N))
    return base


def fit_loglog_slope(points) -> tuple[float, float, float]:
    """OLS of ``log value`` on ``log N``; returns ``(slope, intercept, slope stderr)``."""
    pts = [(float(n), float(v)) for n, v in points]
    if len(pts) < 3:
        raise ValueError("need at least three points")
    if any(v <= 0 or n <= 0 for n, v in pts):
        raise NonPositiveValue("log-log fit needs positive N and values")
    x = np.log([p[0] for p in pts])
    y = np.log([p[1] for p in pts])
    xc = x - x.mean()
    sxx = float(xc @ xc)
    slope = float(xc @ (y - y.mean())) / sxx
    intercept = float(y.mean() - slope * x.mean())
    resid = y - (intercept + slope * x)
    dof = len(pts) - 2
    stderr = math.sqrt(float(resid @ resid) / dof / sxx) if dof > 0 else float("nan")
    return slope, intercept, stderr


@dataclass
class ChaosRow:
    N: int
    reps: int
    estimate: float
    stderr: float
    per_time: list = field(default_factory=list)


@dataclass
class ChaosTable:
    rows: list[ChaosRow]
    t_grid: np.ndarray
    slope: float = float("nan")
    intercept: float = float("nan")
    slope_stderr: float = float("nan")
    reference_slope: float = -0.5
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        ns = [r.N for r in self.rows]
        if any(b <= a for a, b in zip(ns, ns[1:])):
            raise ValueError("N values must increase strictly")
        if any(r.estimate < 0 for r in self.rows):
            raise ValueError("estimates must be nonnegative")
        if len(self.rows) >= 3 and all(r.estimate > 0 for r in self.rows):
            self.slope, self.intercept, self.slope_stderr = fit_loglog_slope(
                [(r.N, r.estimate) for r in self.rows])

    def slope_ci(self, z: float = 1.96) -> tuple[float, float]:
        return self.slope - z * self.slope_stderr, self.slope + z * self.slope_stderr

    def monotone_within_ci(self, z: float = 1.96) -> bool:
        """No estimate exceeds its predecessor by more than the combined CI half-width."""
        for a, b in zip(self.rows, self.rows[1:]):
            if b.estimate - a.estimate > z * math.hypot(a.stderr, b.stderr):
                return False
        return True


def write_chaos_csv(table: ChaosTable, path) -> None:
    with open(Path(path), "w", newline="") as fh:
        meta = " ".join(f"{k}={v}" for k, v in sorted(table.meta.items()))
        fh.write(f"# chaos table {meta}\n")
        w = csv.writer(fh)
        w.writerow(["N", "reps", "estimate", "stderr"])
        for r in table.rows:
            w.writerow([r.N, r.reps, repr(float(r.estimate)), repr(float(r.stderr))])
        w.writerow(["slope", "", repr(float(table.slope)), repr(float(table.slope_stderr))])
        w.writerow(["reference_slope", "", repr(float(table.reference_slope)), ""])


def chaos_sweep(spec, source, N_list, reps: int, n_t: int = 64, seed: int = 0, t_nodes: int = 17,
                ref_factor: int = 8, chunk: int = 64) -> ChaosTable:
    """``sup_t E[W2^2(empirical N-player law, limit conditional law)]`` for each N.

    ``n_t`` must be a multiple of ``t_nodes - 1`` so the t-grid lies on the
    simulation grid. If ``source`` carries a Riccati solution the limit law is
    the exact Gaussian of the time-discretised limit dynamics; otherwise a
    block of ``ref_factor * max(N_list)`` independent particles on the same
    regime paths stands in for it.
    """
    from .nplayer_sim import draw_noise, run_system

    if spec.dim_state != 1:
        raise ValueError("exact W2 is implemented for d = 1 only")
    N_list = [int(n) for n in N_list]
    if (t_nodes - 1) <= 0 or n_t % (t_nodes - 1):
        raise ValueError(f"n_t={n_t} is not a multiple of {t_nodes - 1}")
    stride = n_t // (t_nodes - 1)
    nodes = np.arange(0, n_t + 1, stride)
    exact = getattr(source, "sol", None) is not None
    p_ref = ref_factor * max(N_list)
    rows = []
    for N in N_list:
        vals = np.empty((reps, len(nodes)))
        for start in range(0, reps, chunk):
            r = min(chunk, reps - start)
            paths, dW = draw_noise(spec, N, r, n_t, seed, start)
            run = run_system(spec, source, paths, dW, keep_paths=True)[0]
            if not exact:
                _, dWr = draw_noise(spec, p_ref, r, n_t, seed, start, tag="sim-reference")
                ref = run_system(spec, source, paths, dWr, keep_paths=True)[0]
            for k in range(r):
                for j, n in enumerate(nodes):
                    x = run.X[k, n, :, 0]
                    if exact:
                        mean = run.limit_mean[k, n, 0]
                        var = max(run.limit_m2[k, n] - mean**2, 0.0)
                        vals[start + k, j] = w2sq_to_gaussian(x, mean, math.sqrt(var))
                    else:
                        vals[start + k, j] = wasserstein2_quantile(x, ref.X[k, n, :, 0]) ** 2
        per_t = vals.mean(axis=0)
        j = int(np.argmax(per_t))
        rows.append(ChaosRow(N, reps, float(per_t[j]), float(vals[:, j].std(ddof=1) / math.sqrt(reps)),
                             per_t.tolist()))
    t_grid = np.linspace(0.0, spec.horizon, n_t + 1)[nodes]
    return ChaosTable(rows, t_grid, meta={"spec": spec.name, "seed": seed, "reps": reps, "n_t": n_t,
                                          "reference": "exact-gaussian" if exact else f"block-{p_ref}"})
