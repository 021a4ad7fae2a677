"""Hamiltonian ``H = p.b + f + tr(q' sigma)`` and its minimiser in the control.

Since sigma does not depend on the control, the minimiser ignores ``q``.
LQ specs use the closed form ``-R^{-1} b2' p``; otherwise a damped Newton
iteration from zero is run on ``a -> f(a) + p.b2 a`` for a whole batch at once.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .game_model import GameSpec, MeasureArg

__all__ = [
    "NonConvergence",
    "MinimizerResult",
    "hamiltonian_value",
    "minimize",
    "alpha_hat",
    "growth_bound",
]

MAX_NEWTON_ITERS = 200


class NonConvergence(RuntimeError):
    pass


@dataclass(frozen=True)
class MinimizerResult:
    alpha_hat: np.ndarray
    h_value: np.ndarray
    gradient_norm_at_opt: np.ndarray
    iterations: int
    closed_form: bool


def hamiltonian_value(spec: GameSpec, t, x, mu: MeasureArg, a, p, q, i) -> np.ndarray:
    i = spec.check_regime(i)
    x = np.asarray(x, dtype=float)
    p = np.asarray(p, dtype=float)
    val = np.sum(p * spec.drift(t, x, mu, a, i), axis=-1) + spec.f(t, x, mu, a, i)
    if q is not None:
        val = val + np.einsum("...ij,...ij->...", np.asarray(q, dtype=float), spec.sigma(t, x, mu, i))
    return val


def _reduced(spec, t, x, mu, p, i, b2):
    """Control-dependent part of H and its gradient in the control."""
    def phi(a):
        return spec.f(t, x, mu, a, i) + np.sum((p @ b2) * a, axis=-1)

    def grad(a):
        return spec.grad_a_f(t, x, mu, a, i) + p @ b2

    return phi, grad


def _hessian(spec, t, x, mu, a, i, h=1e-6):
    if spec.hess_a_f is not None:
        return np.asarray(spec.hess_a_f(t, x, mu, a, i), dtype=float)
    m = a.shape[-1]
    out = np.empty(a.shape + (m,))
    for k in range(m):
        e = np.zeros(m)
        e[k] = h
        out[..., :, k] = (spec.grad_a_f(t, x, mu, a + e, i) - spec.grad_a_f(t, x, mu, a - e, i)) / (2 * h)
    return 0.5 * (out + np.swapaxes(out, -1, -2))


def minimize(spec: GameSpec, t, x, mu: MeasureArg, p, i, tol: float = 1e-10,
             max_iter: int = MAX_NEWTON_ITERS) -> MinimizerResult:
    """Minimise ``H(t, x, mu, ., p, q, i)`` for a batch of ``(x, p)`` pairs."""
    i = spec.check_regime(i)
    x = np.asarray(x, dtype=float)
    p = np.asarray(p, dtype=float)
    batch = np.broadcast_shapes(x.shape[:-1], p.shape[:-1], np.shape(mu.mean)[:-1])
    x = np.broadcast_to(x, batch + x.shape[-1:])
    p = np.broadcast_to(p, batch + p.shape[-1:])
    b2 = np.atleast_2d(spec.b2(t, i))
    phi, grad = _reduced(spec, t, x, mu, p, i, b2)

    if spec.lq is not None:
        a = -(p @ b2) @ np.linalg.inv(spec.lq.R[i]).T
        gn = np.linalg.norm(grad(a), axis=-1)
        return MinimizerResult(a, hamiltonian_value(spec, t, x, mu, a, p, None, i), gn, 0, True)

    a = np.zeros(batch + (spec.dim_control,))
    g = grad(a)
    gn = np.linalg.norm(g, axis=-1)
    # relative stop: the gradient of a superlinear cost cannot resolve below eps * |grad_a f|
    thresh = tol * (1.0 + np.linalg.norm(p @ b2, axis=-1))
    it = 0
    while np.any(gn > thresh):
        if it >= max_iter:
            raise NonConvergence(f"Newton did not reach residual {tol:g} in {max_iter} iterations "
                                 f"(worst {gn.max():.3e}); check strong convexity in the control")
        it += 1
        active = gn > thresh
        hess = _hessian(spec, t, x, mu, a, i)
        step = -np.linalg.solve(hess, g[..., None])[..., 0]
        f0 = phi(a)
        slope = np.sum(g * step, axis=-1)
        eta = np.ones(batch)
        for _ in range(60):
            trial = a + eta[..., None] * step
            ok = phi(trial) <= f0 + 1e-4 * eta * slope + 1e-14 * (1 + np.abs(f0))
            if np.all(ok | ~active):
                break
            eta = np.where(ok | ~active, eta, 0.5 * eta)
        a = np.where(active[..., None], a + eta[..., None] * step, a)
        g = grad(a)
        gn = np.linalg.norm(g, axis=-1)
    return MinimizerResult(a, hamiltonian_value(spec, t, x, mu, a, p, None, i), gn, it, False)


def alpha_hat(spec: GameSpec, t, x, mu: MeasureArg, p, i, tol: float = 1e-10) -> np.ndarray:
    return minimize(spec, t, x, mu, p, i, tol).alpha_hat


def growth_bound(spec: GameSpec, t, x, mu: MeasureArg, p, i) -> np.ndarray:
    """Pointwise a-priori bound ``(|grad_a f(0)| + |b2| |p|) / lam`` on the minimiser."""
    i = spec.check_regime(i)
    x = np.asarray(x, dtype=float)
    p = np.asarray(p, dtype=float)
    zero = np.zeros(np.broadcast_shapes(x.shape[:-1], p.shape[:-1]) + (spec.dim_control,))
    g0 = np.linalg.norm(spec.grad_a_f(t, x, mu, zero, i), axis=-1)
    nb2 = np.linalg.norm(np.atleast_2d(spec.b2(t, i)), 2)
    return (g0 + nb2 * np.linalg.norm(p, axis=-1)) / spec.lam
