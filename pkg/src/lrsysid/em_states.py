"""Classical EM with the state sequence as latent variable.

The E-step is a fixed-interval smoother; the M-step solves linear least
squares normal equations for ``[A B]`` and ``[C D]`` and updates the
covariances in closed form. Process noise is parametrized as a full
covariance ``Q`` with ``G = I``, which requires ``n_w = n_x``: a singular
model has no transition density, so the method does not apply to it.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass

import numpy as np

from .em_disturbances import EMHistory, EMRecord
from .inference import LOG2PI, is_dirac, kalman_filter, _backward_pass, log_likelihood
from .model import ExplicitModel, spectral_radius

__all__ = [
    "SingularModelError",
    "DegenerateEStepWarning",
    "SmootherBreakdownError",
    "StateMoments",
    "state_moments",
    "q_states",
    "em_states_iterate",
    "em_states_run",
    "to_full_noise",
]


class SingularModelError(ValueError):
    """Singular model unsupported by latent-states EM (the state transition has no density)."""


class SmootherBreakdownError(ArithmeticError):
    """Smoothed moments lost positive semidefiniteness (typically a weakly observable unstable mode)."""


class DegenerateEStepWarning(RuntimeWarning):
    """Zero process noise: the auxiliary function is undefined away from the current ``(A, B)``."""


@dataclass(frozen=True, eq=False)
class StateMoments:
    """Smoothed sufficient statistics of the state sequence.

    ``Sxx`` and friends are sums of ``E[a b' | y]`` over the indicated ranges:
    ``z_t = [x_t; u_t]`` over ``t = 1..T-1`` for the transition, and over
    ``t = 1..T`` for the output map.
    """

    x1: np.ndarray
    P1: np.ndarray
    S_next: np.ndarray      # sum E[x_{t+1} x_{t+1}'], t = 1..T-1
    S_cross: np.ndarray     # sum E[x_{t+1} z_t']
    S_zz: np.ndarray        # sum E[z_t z_t'], t = 1..T-1
    S_yy: np.ndarray        # sum y_t y_t', t = 1..T
    S_yz: np.ndarray        # sum y_t E[z_t'], t = 1..T
    S_zz_all: np.ndarray    # sum E[z_t z_t'], t = 1..T
    T: int


def state_moments(model, u, y):
    u = np.asarray(u, dtype=float).reshape(len(u), -1)
    y = np.asarray(y, dtype=float).reshape(len(y), -1)
    sm = _backward_pass(model, kalman_filter(model, u, y))
    x, P, M = sm.mean, sm.cov, sm.cross
    T = x.shape[0]
    Exx = P + np.einsum("ti,tj->tij", x, x)
    Exu = np.einsum("ti,tj->tij", x, u)
    Ezz = np.block([[Exx, Exu], [np.swapaxes(Exu, 1, 2), np.einsum("ti,tj->tij", u, u)]])
    Enx = M + np.einsum("ti,tj->tij", x[1:], x[:-1])
    Enz = np.concatenate([Enx, np.einsum("ti,tj->tij", x[1:], u[:-1])], axis=2)
    zmean = np.concatenate([x, u], axis=1)
    return StateMoments(
        x1=x[0].copy(),
        P1=P[0].copy(),
        S_next=Exx[1:].sum(axis=0),
        S_cross=Enz.sum(axis=0),
        S_zz=Ezz[:-1].sum(axis=0),
        S_yy=y.T @ y,
        S_yz=y.T @ zmean,
        S_zz_all=Ezz.sum(axis=0),
        T=T,
    )


def to_full_noise(model):
    """Rewrite ``G Sigma_w G'`` as a full covariance with ``G = I``; rejects singular models."""
    if model.n_w < model.n_x:
        raise SingularModelError("singular model unsupported by latent-states EM "
                                 f"(n_w = {model.n_w} < n_x = {model.n_x})")
    if np.allclose(model.G, np.eye(model.n_x)):
        return model
    if abs(np.linalg.det(model.G)) < 1e-12:
        raise SingularModelError("singular model unsupported by latent-states EM (G is singular)")
    Q = model.G @ model.Sigma_w @ model.G.T
    return model.replace(G=np.eye(model.n_x), Sigma_w=0.5 * (Q + Q.T))


def _sym(M):
    return 0.5 * (M + M.T)


def _residual_moment(S_aa, S_az, S_zz, W):
    """``sum E[(a - W z)(a - W z)']`` from the accumulated moments."""
    return _sym(S_aa - W @ S_az.T - S_az @ W.T + W @ S_zz @ W.T)


def _gaussian_sum(Sigma, S, count):
    """``-1/2 [count (n log 2 pi + log det Sigma) + tr(Sigma^-1 S)]``; Dirac rule for ``Sigma = 0``."""
    if is_dirac(Sigma):
        tol = 1e-10 * max(1.0, float(np.abs(S).max(initial=0.0)))
        return 0.0 if np.abs(S).max(initial=0.0) <= tol else -np.inf
    sign, logdet = np.linalg.slogdet(Sigma)
    if sign <= 0:
        raise ValueError("covariance must be positive definite or exactly zero")
    n = Sigma.shape[0]
    return -0.5 * (count * (n * LOG2PI + logdet) + float(np.trace(np.linalg.solve(Sigma, S))))


def q_states(theta: ExplicitModel, mom: StateMoments):
    """Latent-states auxiliary function on the true log-density scale.

    Process noise enters as ``G Sigma_w G'``. When that covariance is zero the
    value is ``-inf`` unless the smoothed transitions are reproduced exactly.
    """
    d = mom.x1 - theta.mu
    q = _gaussian_sum(theta.Sigma_1, mom.P1 + np.outer(d, d), 1)
    AB = np.hstack([theta.A, theta.B])
    Qx = _sym(theta.G @ theta.Sigma_w @ theta.G.T)
    if not is_dirac(Qx) and np.linalg.matrix_rank(Qx) < theta.n_x:
        raise SingularModelError("singular model unsupported by latent-states EM")
    q += _gaussian_sum(Qx, _residual_moment(mom.S_next, mom.S_cross, mom.S_zz, AB), mom.T - 1)
    CD = np.hstack([theta.C, theta.D])
    q += _gaussian_sum(theta.Sigma_v, _residual_moment(mom.S_yy, mom.S_yz, mom.S_zz_all, CD), mom.T)
    return float(q)


def _solve_normal(S_az, S_zz):
    """``W`` with ``W S_zz = S_az``; the minimum-norm solution when ``S_zz`` is singular (e.g. ``u = 0``)."""
    return np.linalg.lstsq(S_zz.T, S_az.T, rcond=None)[0].T


def em_states_iterate(theta_k: ExplicitModel, u, y):
    """One EM iteration; returns the updated model (``G = I``, full ``Sigma_w``).

    With ``Sigma_w = 0`` the auxiliary function is undefined for any other
    ``(A, B)``; the update then keeps ``(A, B, Sigma_w)`` and issues a
    :class:`DegenerateEStepWarning`.
    """
    theta_k = to_full_noise(theta_k)
    mom = state_moments(theta_k, u, y)
    T = mom.T
    CD = _solve_normal(mom.S_yz, mom.S_zz_all)
    R = _residual_moment(mom.S_yy, mom.S_yz, mom.S_zz_all, CD) / T
    n_x = theta_k.n_x
    if is_dirac(theta_k.Sigma_w):
        warnings.warn("zero process noise: latent-states update of (A, B) is undefined, keeping them",
                      DegenerateEStepWarning, stacklevel=2)
        A, B, Q = theta_k.A, theta_k.B, theta_k.Sigma_w
    else:
        AB = _solve_normal(mom.S_cross, mom.S_zz)
        Q = _residual_moment(mom.S_next, mom.S_cross, mom.S_zz, AB) / (T - 1)
        A, B = AB[:, :n_x], AB[:, n_x:]
    for name, M in (("Sigma_1", mom.P1), ("Sigma_w", Q), ("Sigma_v", R)):
        lam = np.linalg.eigvalsh(_sym(M))
        if lam[0] < -1e-9 * max(1.0, abs(lam[-1])):
            raise SmootherBreakdownError(f"{name} update is indefinite (min eig {lam[0]:.3g})")
    return theta_k.replace(mu=mom.x1, Sigma_1=_sym(mom.P1), Sigma_w=Q, Sigma_v=R,
                           A=A, B=B, C=CD[:, :n_x], D=CD[:, n_x:])


def em_states_run(theta0: ExplicitModel, u, y, *, max_iters=500, delta=1e-4, callback=None):
    """Iterate until the log-likelihood changes by less than ``delta`` or ``max_iters`` is reached.

    A numerical breakdown of the smoother ends the run, keeps the last
    iterate and records the reason in ``history.error``.
    """
    theta = to_full_noise(theta0)
    L = log_likelihood(theta, u, y)
    hist = EMHistory()
    hist.records.append(EMRecord(0, L, spectral_radius(theta.A), "init", 0.0))
    hist.models.append(theta)
    for k in range(1, max_iters + 1):
        t0 = time.perf_counter()
        try:
            new = em_states_iterate(theta, u, y)
            L_new = log_likelihood(new, u, y)
        except (SmootherBreakdownError, np.linalg.LinAlgError) as exc:
            hist.error = f"iteration {k}: {exc}"
            break
        hist.records.append(EMRecord(k, L_new, spectral_radius(new.A), "closed-form",
                                     1e3 * (time.perf_counter() - t0)))
        hist.models.append(new)
        if callback is not None:
            callback(k, new, L_new)
        done = abs(L_new - L) < delta
        theta, L = new, L_new
        if done:
            hist.converged = True
            break
    return hist
