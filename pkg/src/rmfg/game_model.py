"""Game coefficients per regime, the LQ family, a small catalog and a spot-check validator.

All coefficient callables are vectorised over leading batch axes:

* ``b0(t, mu, i) -> [..., d]``, ``b1(t, i) -> (d, d)``, ``b2(t, i) -> (d, m)``
* ``sigma(t, x, mu, i) -> [..., d, d]``
* ``f(t, x, mu, a, i) -> [...]`` with ``grad_x_f -> [..., d]``, ``grad_a_f -> [..., m]``
* ``g(x, mu, i) -> [...]`` with ``grad_x_g -> [..., d]``

``mu`` is a :class:`MeasureArg`; its ``mean`` may carry batch axes that
broadcast against ``x``. Regimes are 0-based.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, NamedTuple

import numpy as np

from .regime_chain import GeneratorMatrix, RegimeOutOfRange, validate_generator

__all__ = [
    "DimensionMismatch",
    "TimeOutOfRange",
    "MeasureArg",
    "LqParams",
    "GameSpec",
    "Coefficients",
    "Check",
    "ValidationReport",
    "build_lq_spec",
    "eval_coefficients",
    "validate_spec",
    "catalog_spec",
    "CATALOG",
]


class DimensionMismatch(ValueError):
    pass


class TimeOutOfRange(ValueError):
    pass


@dataclass(frozen=True)
class MeasureArg:
    """A probability measure on R^d, as moments and optionally as weighted atoms."""

    mean: np.ndarray
    second_moment: np.ndarray
    atoms: np.ndarray | None = None
    weights: np.ndarray | None = None

    @classmethod
    def empirical(cls, points, weights=None) -> "MeasureArg":
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        n = pts.shape[0]
        if weights is None:
            w = np.full(n, 1.0 / n)
        else:
            w = np.asarray(weights, dtype=float)
            if w.shape != (n,) or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
                raise ValueError("weights must be nonnegative and sum to one")
        mean = w @ pts
        m2 = w @ np.sum(pts**2, axis=1)
        return cls(mean, np.asarray(m2), pts, w)

    @classmethod
    def dirac(cls, x) -> "MeasureArg":
        x = np.asarray(x, dtype=float)
        return cls(x, np.sum(x**2, axis=-1))

    @classmethod
    def moments(cls, mean, second_moment=None) -> "MeasureArg":
        mean = np.asarray(mean, dtype=float)
        if second_moment is None:
            second_moment = np.sum(mean**2, axis=-1)
        return cls(mean, np.asarray(second_moment, dtype=float))

    @property
    def variance(self) -> np.ndarray:
        """Total variance ``E|X|^2 - |E X|^2``."""
        return self.second_moment - np.sum(self.mean**2, axis=-1)


def _per_regime(value, s0: int, shape: tuple[int, ...], name: str) -> np.ndarray:
    a = np.asarray(value, dtype=float)
    if a.shape == shape or (a.ndim == 0 and shape == ()):
        return np.broadcast_to(a, (s0,) + shape).copy()
    if a.ndim == 0:
        if len(shape) == 2 and shape[0] == shape[1]:
            return np.broadcast_to(a * np.eye(shape[0]), (s0,) + shape).copy()
        return np.full((s0,) + shape, float(a))
    if a.shape == (s0,) and len(shape) == 2 and shape[0] == shape[1]:
        return a[:, None, None] * np.eye(shape[0])[None]
    if a.shape == (s0,) + shape:
        return a.copy()
    if a.shape == (s0,) and shape == (1, 1):
        return a.reshape(s0, 1, 1)
    raise DimensionMismatch(f"{name}: cannot broadcast shape {a.shape} to {(s0,) + shape}")


@dataclass(frozen=True)
class LqParams:
    """Per-regime linear-quadratic coefficients.

    Running cost ``1/2 a'Ra + 1/2 (x - s m)'Qx(x - s m)``, terminal cost
    ``1/2 (x - sg m)'G(x - sg m)``, drift ``b1 x + b2 a + c m`` and constant
    volatility, where ``m`` is the mean of the measure argument.
    """

    Qx: np.ndarray
    R: np.ndarray
    s: np.ndarray
    G: np.ndarray
    b1: np.ndarray
    b2: np.ndarray
    c: np.ndarray
    sigma: np.ndarray
    sg: np.ndarray

    @classmethod
    def build(cls, s0: int = 1, d: int = 1, m: int = 1, *, Qx=1.0, R=1.0, s=0.0, G=1.0,
              b1=0.0, b2=1.0, c=0.0, sigma=1.0, sg=None) -> "LqParams":
        """Broadcast scalars or per-regime lists to full arrays."""
        b2a = np.asarray(b2, dtype=float)
        if b2a.ndim == 0 and d == m:
            b2v = _per_regime(b2a, s0, (d, m), "b2")
        elif b2a.ndim == 0:
            b2v = np.broadcast_to(b2a * np.eye(d, m), (s0, d, m)).copy()
        elif b2a.shape == (s0,) and d == m:
            b2v = b2a[:, None, None] * np.eye(d)[None]
        else:
            b2v = _per_regime(b2a, s0, (d, m), "b2")
        return cls(
            Qx=_per_regime(Qx, s0, (d, d), "Qx"),
            R=_per_regime(R, s0, (m, m), "R"),
            s=_per_regime(s, s0, (), "s"),
            G=_per_regime(G, s0, (d, d), "G"),
            b1=_per_regime(b1, s0, (d, d), "b1"),
            b2=b2v,
            c=_per_regime(c, s0, (d, d), "c"),
            sigma=_per_regime(sigma, s0, (d, d), "sigma"),
            sg=_per_regime(s if sg is None else sg, s0, (), "sg"),
        )

    def __post_init__(self):
        s0, d, m = self.b2.shape
        expect = {"Qx": (s0, d, d), "R": (s0, m, m), "s": (s0,), "G": (s0, d, d),
                  "b1": (s0, d, d), "c": (s0, d, d), "sigma": (s0, d, d), "sg": (s0,)}
        for name, shp in expect.items():
            if np.shape(getattr(self, name)) != shp:
                raise DimensionMismatch(f"{name} has shape {np.shape(getattr(self, name))}, expected {shp}")
        for i in range(s0):
            for name in ("R", "Qx", "G"):
                a = getattr(self, name)[i]
                if not np.allclose(a, a.T, atol=1e-12):
                    raise ValueError(f"{name}[{i}] is not symmetric")
            if np.linalg.eigvalsh(self.R[i]).min() <= 0:
                raise ValueError(f"R[{i}] is not positive definite")
            for name in ("Qx", "G"):
                if np.linalg.eigvalsh(getattr(self, name)[i]).min() < -1e-12:
                    raise ValueError(f"{name}[{i}] is not positive semidefinite")

    @property
    def n_regimes(self) -> int:
        return self.b2.shape[0]

    @property
    def dim_state(self) -> int:
        return self.b2.shape[1]

    @property
    def dim_control(self) -> int:
        return self.b2.shape[2]

    def control_gain(self) -> np.ndarray:
        """``b2 R^{-1} b2'`` per regime, shape ``(s0, d, d)``."""
        return np.einsum("idm,imn,ien->ide", self.b2, np.linalg.inv(self.R), self.b2)


@dataclass(frozen=True)
class GameSpec:
    """Full coefficient set for one regime-switching game family."""

    name: str
    horizon: float
    dim_state: int
    dim_control: int
    regimes: GeneratorMatrix
    b0: Callable
    b1: Callable
    b2: Callable
    sigma: Callable
    f: Callable
    grad_x_f: Callable
    grad_a_f: Callable
    g: Callable
    grad_x_g: Callable
    lam: float
    nu1: float
    nu2: float
    x0: np.ndarray
    initial_regime: int = 0
    interaction: str = "conditional-law"
    hess_a_f: Callable | None = None
    sigma_constant: bool = False
    lq: LqParams | None = None
    meta: dict = field(default_factory=dict)

    @property
    def n_regimes(self) -> int:
        return self.regimes.states

    def check_regime(self, i) -> int:
        return self.regimes.check_regime(i)

    def drift(self, t, x, mu: MeasureArg, a, i) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        a = np.asarray(a, dtype=float)
        return self.b0(t, mu, i) + x @ self.b1(t, i).T + a @ self.b2(t, i).T

    def with_(self, **changes) -> "GameSpec":
        return replace(self, **changes)


class Coefficients(NamedTuple):
    b: np.ndarray
    sigma: np.ndarray
    f: np.ndarray
    grad_x_f: np.ndarray
    grad_a_f: np.ndarray


def eval_coefficients(spec: GameSpec, t, x, mu: MeasureArg, a, i) -> Coefficients:
    if not 0.0 <= t <= spec.horizon:
        raise TimeOutOfRange(f"t={t} outside [0, {spec.horizon}]")
    i = spec.check_regime(i)
    x = np.asarray(x, dtype=float)
    a = np.asarray(a, dtype=float)
    return Coefficients(
        spec.drift(t, x, mu, a, i),
        spec.sigma(t, x, mu, i),
        spec.f(t, x, mu, a, i),
        spec.grad_x_f(t, x, mu, a, i),
        spec.grad_a_f(t, x, mu, a, i),
    )


def _quad(v, M):
    return 0.5 * np.einsum("...i,ij,...j->...", v, M, v)


def build_lq_spec(params: LqParams, Q: GeneratorMatrix, T: float, x0, i0: int = 0,
                  name: str = "lq") -> GameSpec:
    """Wire an :class:`LqParams` set into a :class:`GameSpec` with analytic gradients."""
    d, m = params.dim_state, params.dim_control
    if params.n_regimes != Q.states:
        raise DimensionMismatch(f"params have {params.n_regimes} regimes, generator has {Q.states}")
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    if x0.shape != (d,):
        raise DimensionMismatch(f"x0 has shape {x0.shape}, expected ({d},)")
    Q.check_regime(i0)
    p = params

    def dev(x, mu, i, coupling):
        return np.asarray(x, dtype=float) - coupling[i] * np.asarray(mu.mean)

    def b0(t, mu, i):
        return np.asarray(mu.mean) @ p.c[i].T

    def sigma(t, x, mu, i):
        x = np.asarray(x)
        return np.broadcast_to(p.sigma[i], x.shape[:-1] + (d, d))

    def f(t, x, mu, a, i):
        return _quad(np.asarray(a, dtype=float), p.R[i]) + _quad(dev(x, mu, i, p.s), p.Qx[i])

    def grad_x_f(t, x, mu, a, i):
        return dev(x, mu, i, p.s) @ p.Qx[i].T

    def grad_a_f(t, x, mu, a, i):
        return np.asarray(a, dtype=float) @ p.R[i].T

    def hess_a_f(t, x, mu, a, i):
        a = np.asarray(a)
        return np.broadcast_to(p.R[i], a.shape[:-1] + (m, m))

    def g(x, mu, i):
        return _quad(dev(x, mu, i, p.sg), p.G[i])

    def grad_x_g(x, mu, i):
        return dev(x, mu, i, p.sg) @ p.G[i].T

    a_mat = np.einsum("ijk,ilk->ijl", p.sigma, p.sigma)
    eig = np.linalg.eigvalsh(a_mat)
    return GameSpec(
        name=name, horizon=float(T), dim_state=d, dim_control=m, regimes=Q,
        b0=b0, b1=lambda t, i: p.b1[i], b2=lambda t, i: p.b2[i], sigma=sigma,
        f=f, grad_x_f=grad_x_f, grad_a_f=grad_a_f, g=g, grad_x_g=grad_x_g,
        lam=float(min(np.linalg.eigvalsh(r).min() for r in p.R)),
        nu1=float(eig.min()), nu2=float(eig.max()), x0=x0, initial_regime=int(i0),
        hess_a_f=hess_a_f, sigma_constant=True, lq=p,
    )


def _smooth_nonquadratic(Q: GeneratorMatrix, T: float, x0, i0: int = 0, *, qx=1.0, s=0.0,
                         G=1.0, b1=0.0, b2=1.0, c=0.0, sigma=1.0) -> GameSpec:
    """1-D test family with quartic control cost ``|a|^4/4 + |a|^2/2``."""
    s0 = Q.states
    qx = _per_regime(qx, s0, (), "qx")
    s = _per_regime(s, s0, (), "s")
    G = _per_regime(G, s0, (), "G")
    b1 = _per_regime(b1, s0, (), "b1")
    b2 = _per_regime(b2, s0, (), "b2")
    c = _per_regime(c, s0, (), "c")
    sig = _per_regime(sigma, s0, (), "sigma")
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))

    def f(t, x, mu, a, i):
        a2 = np.sum(np.asarray(a) ** 2, axis=-1)
        r = np.asarray(x) - s[i] * np.asarray(mu.mean)
        return 0.25 * a2**2 + 0.5 * a2 + 0.5 * qx[i] * np.sum(r**2, axis=-1)

    def grad_a_f(t, x, mu, a, i):
        a = np.asarray(a, dtype=float)
        a2 = np.sum(a**2, axis=-1, keepdims=True)
        return (a2 + 1.0) * a

    def hess_a_f(t, x, mu, a, i):
        a = np.asarray(a, dtype=float)
        a2 = np.sum(a**2, axis=-1)[..., None, None]
        return (a2 + 1.0) * np.eye(a.shape[-1]) + 2.0 * a[..., :, None] * a[..., None, :]

    def grad_x_f(t, x, mu, a, i):
        return qx[i] * (np.asarray(x) - s[i] * np.asarray(mu.mean))

    def sigma_fn(t, x, mu, i):
        x = np.asarray(x)
        return np.broadcast_to(sig[i] * np.eye(1), x.shape[:-1] + (1, 1))

    return GameSpec(
        name="smooth-nonquadratic-test", horizon=float(T), dim_state=1, dim_control=1,
        regimes=Q,
        b0=lambda t, mu, i: c[i] * np.asarray(mu.mean),
        b1=lambda t, i: np.array([[b1[i]]]), b2=lambda t, i: np.array([[b2[i]]]),
        sigma=sigma_fn, f=f, grad_x_f=grad_x_f, grad_a_f=grad_a_f,
        g=lambda x, mu, i: 0.5 * G[i] * np.sum(np.asarray(x) ** 2, axis=-1),
        grad_x_g=lambda x, mu, i: G[i] * np.asarray(x, dtype=float),
        lam=1.0, nu1=float(np.min(sig**2)), nu2=float(np.max(sig**2)), x0=x0,
        initial_regime=int(i0), hess_a_f=hess_a_f, sigma_constant=True,
        meta={"qx": qx, "s": s, "G": G, "b1": b1, "b2": b2, "c": c, "sigma": sig},
    )


# Per-regime defaults. "lq" is the unit problem whose Riccati flow is stationary (K = 1).
CATALOG = {
    "lq": {
        "kind": "lq", "generator": [[0.0]], "horizon": 1.0, "x0": [1.0],
        "params": dict(Qx=1.0, R=1.0, s=0.0, G=1.0, sg=0.0, b1=0.0, b2=1.0, c=0.0, sigma=1.0),
    },
    "lq-mean-drift": {
        "kind": "lq", "generator": [[-1.0, 1.0], [2.0, -2.0]], "horizon": 1.0, "x0": [1.0],
        "params": dict(Qx=[1.0, 2.0], R=1.0, s=[0.5, 0.8], G=[1.0, 0.5], sg=[0.5, 0.8],
                       b1=[0.0, -0.2], b2=1.0, c=[0.3, 0.3], sigma=[0.8, 0.5]),
    },
    "smooth-nonquadratic-test": {
        "kind": "smooth", "generator": [[-1.0, 1.0], [1.0, -1.0]], "horizon": 1.0, "x0": [0.5],
        "params": dict(qx=[1.0, 1.5], s=[0.0, 0.5], G=1.0, b1=0.0, b2=1.0, c=0.0, sigma=0.7),
    },
}


def catalog_spec(name: str, *, generator=None, horizon=None, x0=None, initial_regime: int = 0,
                 rate_bound=None, **overrides) -> GameSpec:
    """Build a catalog entry, with optional generator/horizon/x0 and parameter overrides."""
    if name not in CATALOG:
        raise KeyError(f"unknown catalog entry {name!r}; choose from {sorted(CATALOG)}")
    entry = CATALOG[name]
    Q = validate_generator(entry["generator"] if generator is None else generator, rate_bound)
    T = entry["horizon"] if horizon is None else float(horizon)
    x0v = entry["x0"] if x0 is None else x0
    params = dict(entry["params"])
    unknown = set(overrides) - set(params)
    if unknown:
        raise KeyError(f"unknown parameter(s) for {name}: {sorted(unknown)}")
    params.update(overrides)
    if generator is not None and Q.states != len(entry["generator"]):
        # per-regime default lists no longer fit; keep the first regime's value
        for k, v in list(params.items()):
            if k not in overrides and np.ndim(v) == 1:
                params[k] = v[0]
    if entry["kind"] == "lq":
        d = len(np.atleast_1d(x0v))
        lq = LqParams.build(Q.states, d, d, **params)
        return build_lq_spec(lq, Q, T, x0v, initial_regime, name=name)
    return _smooth_nonquadratic(Q, T, x0v, initial_regime, **params)


# --------------------------------------------------------------------------- validation


@dataclass
class Check:
    name: str
    status: str  # PASS | FAIL | WARN | SKIP
    estimate: float | None = None
    witness: dict | None = None
    message: str = ""


@dataclass
class ValidationReport:
    spec_name: str
    checks: list[Check]
    info: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(c.status != "FAIL" for c in self.checks)

    def get(self, name: str) -> Check:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def lines(self) -> list[str]:
        out = []
        for c in self.checks:
            est = "" if c.estimate is None else f" estimate={c.estimate:.6g}"
            out.append(f"{c.status:4s} {c.name}{est} {c.message}".rstrip())
        return out


def _fd_grad(fun, z, h=1e-5):
    z = np.asarray(z, dtype=float)
    out = np.empty(z.shape)
    for k in range(z.shape[-1]):
        e = np.zeros(z.shape[-1])
        e[k] = h
        out[..., k] = (fun(z + e) - fun(z - e)) / (2 * h)
    return out


def _rel_err(fd, an):
    return np.max(np.abs(fd - an) / np.maximum(1.0, np.abs(an)), axis=-1)


def validate_spec(spec: GameSpec, sample_budget: int = 1000, rng: np.random.Generator | None = None,
                  need_invertible_b2: bool = True, scale: float = 2.0) -> ValidationReport:
    """Numerical spot checks of the standing hypotheses on random samples.

    Hypotheses cannot be proven from samples; each check estimates a constant
    and reports PASS/FAIL with the offending sample on failure.
    """
    if sample_budget < 100:
        raise ValueError("sample_budget must be at least 100")
    rng = np.random.default_rng(0) if rng is None else rng
    d, m, n = spec.dim_state, spec.dim_control, int(sample_budget)
    checks: list[Check] = []
    info: dict = {"A8": "unvalidated (measure-derivative regularity has no finite-sample test)"}

    def sample(i):
        t = rng.uniform(0, spec.horizon)
        x = spec.x0 + scale * rng.standard_normal((n, d))
        mean = scale * rng.standard_normal((n, d))
        mu = MeasureArg.moments(mean, np.sum(mean**2, axis=-1) + 1.0)
        a = scale * rng.standard_normal((n, m))
        return t, x, mu, a

    grad_worst = {"grad_x_f": 0.0, "grad_a_f": 0.0, "grad_x_g": 0.0, "hess_a_f": 0.0}
    grad_witness: dict = {}
    affine_worst, conv_min, conv_wit = 0.0, np.inf, None
    ell_lo, ell_hi = np.inf, -np.inf
    lip = {"grad_x_f": 0.0, "grad_a_f": 0.0, "grad_x_g": 0.0}
    h3 = 0.0
    b2_min_sv = np.inf
    kh_min = np.inf
    mono_viol, mono_wit = 0.0, None

    for i in range(spec.n_regimes):
        t, x, mu, a = sample(i)
        an = spec.grad_x_f(t, x, mu, a, i)
        fd = _fd_grad(lambda z: spec.f(t, z, mu, a, i), x)
        e = _rel_err(fd, an)
        if e.max() > grad_worst["grad_x_f"]:
            grad_worst["grad_x_f"] = e.max()
            grad_witness["grad_x_f"] = {"regime": i, "x": x[e.argmax()].tolist()}
        an = spec.grad_a_f(t, x, mu, a, i)
        fd = _fd_grad(lambda z: spec.f(t, x, mu, z, i), a)
        e = _rel_err(fd, an)
        if e.max() > grad_worst["grad_a_f"]:
            grad_worst["grad_a_f"] = e.max()
            grad_witness["grad_a_f"] = {"regime": i, "a": a[e.argmax()].tolist()}
        an = spec.grad_x_g(x, mu, i)
        fd = _fd_grad(lambda z: spec.g(z, mu, i), x)
        e = _rel_err(fd, an)
        if e.max() > grad_worst["grad_x_g"]:
            grad_worst["grad_x_g"] = e.max()
            grad_witness["grad_x_g"] = {"regime": i, "x": x[e.argmax()].tolist()}
        if spec.hess_a_f is not None:
            hs = spec.hess_a_f(t, x, mu, a, i)
            for k in range(m):
                fdk = _fd_grad(lambda z: spec.grad_a_f(t, x, mu, z, i)[..., k], a)
                e = _rel_err(fdk, hs[..., k, :])
                grad_worst["hess_a_f"] = max(grad_worst["hess_a_f"], float(e.max()))

        # drift affine in the control
        a2 = scale * rng.standard_normal((n, m))
        b_a = spec.drift(t, x, mu, a, i)
        b_b = spec.drift(t, x, mu, a2, i)
        b_c = spec.drift(t, x, mu, 0.5 * (a + a2), i)
        dev = np.abs(b_a + b_b - 2 * b_c).max(axis=-1) / (1 + np.abs(b_c).max(axis=-1))
        affine_worst = max(affine_worst, float(dev.max()))

        # joint convexity in (x, a), strong in a: Hessian-convention modulus
        x2 = x + scale * rng.standard_normal((n, d))
        lhs = (spec.f(t, x2, mu, a2, i) - spec.f(t, x, mu, a, i)
               - np.sum((x2 - x) * spec.grad_x_f(t, x, mu, a, i), axis=-1)
               - np.sum((a2 - a) * spec.grad_a_f(t, x, mu, a, i), axis=-1))
        ratio = 2.0 * lhs / np.maximum(np.sum((a2 - a) ** 2, axis=-1), 1e-300)
        k = int(np.argmin(ratio))
        if ratio[k] < conv_min:
            conv_min = float(ratio[k])
            conv_wit = {"regime": i, "x": x[k].tolist(), "a": a[k].tolist(),
                        "x2": x2[k].tolist(), "a2": a2[k].tolist()}

        # ellipticity of sigma sigma'
        sg = spec.sigma(t, x, mu, i)
        ev = np.linalg.eigvalsh(np.einsum("...ij,...kj->...ik", sg, sg))
        ell_lo = min(ell_lo, float(ev.min()))
        ell_hi = max(ell_hi, float(ev.max()))

        # Lipschitz constants along random secants
        dz = np.sqrt(np.sum((x2 - x) ** 2, axis=-1) + np.sum((a2 - a) ** 2, axis=-1))
        for key, fn in (("grad_x_f", spec.grad_x_f), ("grad_a_f", spec.grad_a_f)):
            diff = np.linalg.norm(fn(t, x2, mu, a2, i) - fn(t, x, mu, a, i), axis=-1)
            lip[key] = max(lip[key], float(np.max(diff / dz)))
        dx = np.linalg.norm(x2 - x, axis=-1)
        diff = np.linalg.norm(spec.grad_x_g(x2, mu, i) - spec.grad_x_g(x, mu, i), axis=-1)
        lip["grad_x_g"] = max(lip["grad_x_g"], float(np.max(diff / dx)))

        h3 = max(h3, float(np.max(np.linalg.norm(spec.grad_a_f(t, x, mu, a, i), axis=-1)
                                  / (1 + np.linalg.norm(a, axis=-1)))))

        for tt in rng.uniform(0, spec.horizon, size=8):
            sv = np.linalg.svd(np.atleast_2d(spec.b2(tt, i)), compute_uv=False)
            b2_min_sv = min(b2_min_sv, float(sv.min()) if sv.size else 0.0)

        # monotonicity of grad g and the relaxed condition for x-independent sigma
        gdiff = spec.grad_x_g(x2, mu, i) - spec.grad_x_g(x, mu, i)
        kh = np.sum(gdiff * (x2 - x), axis=-1) / np.maximum(dx**2, 1e-300)
        kh_min = min(kh_min, float(kh.min()))
        if spec.sigma_constant:
            b2m = np.atleast_2d(spec.b2(t, i))
            b2inv = np.linalg.pinv(b2m)
            kh_pos = max(float(kh.min()), 0.0)
            ga = spec.grad_a_f(t, x2, mu, a2, i) - spec.grad_a_f(t, x, mu, a, i)
            gx = spec.grad_x_f(t, x2, mu, a2, i) - spec.grad_x_f(t, x, mu, a, i)
            lhs = kh_pos * dx**2
            rhs = (-kh_pos * np.sum((ga @ b2inv.T) ** 2, axis=-1)
                   + np.sum(gx * (x2 - x), axis=-1) + np.sum(ga * (a2 - a), axis=-1))
            viol = (lhs - rhs) / (1 + np.abs(lhs))
            k = int(np.argmax(viol))
            if viol[k] > mono_viol:
                mono_viol = float(viol[k])
                mono_wit = {"regime": i, "x": x[k].tolist(), "x2": x2[k].tolist(),
                            "a": a[k].tolist(), "a2": a2[k].tolist()}

    tol_grad = 1e-6
    for key in ("grad_x_f", "grad_a_f", "grad_x_g"):
        ok = grad_worst[key] <= tol_grad
        checks.append(Check(f"gradient:{key}", "PASS" if ok else "FAIL", grad_worst[key],
                            None if ok else grad_witness.get(key), "central FD, h=1e-5"))
    if spec.hess_a_f is not None:
        ok = grad_worst["hess_a_f"] <= tol_grad
        checks.append(Check("gradient:hess_a_f", "PASS" if ok else "FAIL", grad_worst["hess_a_f"]))
    checks.append(Check("drift-affine-in-control", "PASS" if affine_worst <= 1e-10 else "FAIL",
                        affine_worst))
    ok = conv_min > 0 and conv_min >= 0.99 * spec.lam
    checks.append(Check("convexity", "PASS" if ok else "FAIL", conv_min, None if ok else conv_wit,
                        f"declared modulus {spec.lam:g}"))
    ok = spec.nu1 > 0 and ell_lo >= spec.nu1 * (1 - 1e-9) and ell_hi <= spec.nu2 * (1 + 1e-9)
    checks.append(Check("ellipticity", "PASS" if ok else "FAIL", ell_lo, None if ok else
                        {"min_eig": ell_lo, "max_eig": ell_hi},
                        f"declared [{spec.nu1:g}, {spec.nu2:g}]"))
    off = spec.regimes.rates - np.diag(np.diag(spec.regimes.rates))
    checks.append(Check("rate-bound", "PASS" if np.all(off <= spec.regimes.rate_bound) else "FAIL",
                        float(off.max(initial=0.0))))
    for key, val in lip.items():
        checks.append(Check(f"lipschitz:{key}", "PASS" if np.isfinite(val) else "FAIL", val))
    if need_invertible_b2:
        ok = b2_min_sv > 1e-10 and spec.dim_control >= spec.dim_state
        checks.append(Check("b2-full-rank", "PASS" if ok else "FAIL", b2_min_sv))
    if spec.sigma_constant:
        status = "PASS" if mono_viol <= 1e-9 else "WARN"
        checks.append(Check("monotonicity", status, mono_viol, mono_wit if status == "WARN" else None,
                            "sampled; gates uniqueness only"))
    else:
        checks.append(Check("monotonicity", "SKIP", None, None, "state-dependent sigma"))
    info["H3_ratio"] = h3 / spec.lam
    info["K_h"] = kh_min
    return ValidationReport(spec.name, checks, info)
