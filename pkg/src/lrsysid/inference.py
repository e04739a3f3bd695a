"""Exact Gaussian filtering, smoothing and likelihood evaluation.

The recursive path is a Joseph-form Kalman filter followed by a backward
(Durbin-Koopman style) pass for the states, and a forward innovations
recursion for the joint posterior of ``Z = vec([x_1, w_1..w_{T-1}])``.
:func:`lifted_conditioning_oracle` conditions the stacked joint Gaussian
directly and serves as an independent check of both.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .lifted import lift_explicit
from .model import simulate

__all__ = [
    "FilterBreakdownError",
    "FilterOutput",
    "SmoothedStates",
    "SmoothedPosterior",
    "kalman_filter",
    "log_likelihood",
    "rts_smoother",
    "disturbance_smoother",
    "lifted_conditioning_oracle",
    "is_dirac",
]

LOG2PI = np.log(2.0 * np.pi)
MAX_ORACLE_T = 100


class FilterBreakdownError(np.linalg.LinAlgError):
    """Innovation covariance lost positive definiteness."""


def _sym(M):
    return 0.5 * (M + np.swapaxes(M, -1, -2))


def is_dirac(S):
    return not np.any(np.asarray(S))


@dataclass(frozen=True, eq=False)
class FilterOutput:
    x_pred: np.ndarray      # (T, n_x)  E[x_t | y_{1:t-1}]
    P_pred: np.ndarray      # (T, n_x, n_x)
    x_filt: np.ndarray      # (T, n_x)  E[x_t | y_{1:t}]
    P_filt: np.ndarray
    innov: np.ndarray       # (T, n_y)
    S: np.ndarray           # (T, n_y, n_y) innovation covariances
    gain: np.ndarray        # (T, n_x, n_y) filter gain P C' S^-1
    loglik: float


@dataclass(frozen=True, eq=False)
class SmoothedStates:
    mean: np.ndarray        # (T, n_x)
    cov: np.ndarray         # (T, n_x, n_x)
    cross: np.ndarray       # (T-1, n_x, n_x)  Cov[x_{t+1}, x_t | y]


@dataclass(frozen=True, eq=False)
class SmoothedPosterior:
    """Posterior of the initial state and disturbances given all outputs.

    ``W2[t] = E[w_t w_t' | y]``; the last disturbance does not influence
    ``y_{1:T}`` so ``W2[T-1]`` is the prior covariance.
    """

    x1_mean: np.ndarray
    x1_cov: np.ndarray
    Z_mean: np.ndarray
    Omega: np.ndarray
    W2: np.ndarray
    Delta: np.ndarray

    @property
    def w_mean(self):
        """Posterior disturbance means as a (T, n_w) series, zero at the last step."""
        n_x = self.x1_mean.shape[0]
        n_w = self.W2.shape[1]
        w = np.zeros((self.W2.shape[0], n_w))
        w[:-1] = self.Z_mean[n_x:].reshape(-1, n_w)
        return w


def _as_series(a, n):
    a = np.asarray(a, dtype=float)
    return a[:, None] if a.ndim == 1 and n == 1 else a


def _check_inputs(model, u, y):
    u = _as_series(u, model.n_u)
    y = _as_series(y, model.n_y)
    if u.ndim != 2 or y.ndim != 2 or u.shape[0] != y.shape[0]:
        raise ValueError("u and y must be (T, n) series of equal length")
    if u.shape[1] != model.n_u or y.shape[1] != model.n_y:
        raise ValueError("series dimensions do not match the model")
    try:
        np.linalg.cholesky(model.Sigma_v)
    except np.linalg.LinAlgError:
        raise FilterBreakdownError("Sigma_v must be positive definite") from None
    return u, y


def kalman_filter(model, u, y):
    u, y = _check_inputs(model, u, y)
    T = u.shape[0]
    n_x, n_y = model.n_x, model.n_y
    A, B, C, D = model.A, model.B, model.C, model.D
    Qx = _sym(model.G @ model.Sigma_w @ model.G.T)
    I = np.eye(n_x)

    x_pred = np.empty((T, n_x))
    P_pred = np.empty((T, n_x, n_x))
    x_filt = np.empty((T, n_x))
    P_filt = np.empty((T, n_x, n_x))
    innov = np.empty((T, n_y))
    S_all = np.empty((T, n_y, n_y))
    gain = np.empty((T, n_x, n_y))

    a, P = model.mu.copy(), model.Sigma_1.copy()
    loglik = 0.0
    for t in range(T):
        x_pred[t], P_pred[t] = a, P
        e = y[t] - C @ a - D @ u[t]
        S = _sym(C @ P @ C.T + model.Sigma_v)
        try:
            cS = linalg.cho_factor(S, lower=True)
        except linalg.LinAlgError:
            raise FilterBreakdownError(f"innovation covariance not PD at t={t}") from None
        K = linalg.cho_solve(cS, C @ P).T
        a_f = a + K @ e
        IKC = I - K @ C
        P_f = _sym(IKC @ P @ IKC.T + K @ model.Sigma_v @ K.T)
        loglik -= 0.5 * (n_y * LOG2PI + 2.0 * np.log(np.diag(cS[0])).sum()
                         + e @ linalg.cho_solve(cS, e))
        x_filt[t], P_filt[t], innov[t], S_all[t], gain[t] = a_f, P_f, e, S, K
        a = A @ a_f + B @ u[t]
        P = _sym(A @ P_f @ A.T + Qx)
    return FilterOutput(x_pred, P_pred, x_filt, P_filt, innov, S_all, gain, float(loglik))


def _gaussian_logpdf_rows(res, Sigma):
    c = linalg.cho_factor(Sigma, lower=True)
    n = Sigma.shape[0]
    quad = np.einsum("ti,ti->", res, linalg.cho_solve(c, res.T).T)
    return -0.5 * (res.shape[0] * (n * LOG2PI + 2.0 * np.log(np.diag(c[0])).sum()) + quad)


def log_likelihood(model, u, y):
    """``log p(y_{1:T} | u_{1:T})``; noiseless-simulation shortcut when Sigma_w = Sigma_1 = 0."""
    u, y = _check_inputs(model, u, y)
    if is_dirac(model.Sigma_w) and is_dirac(model.Sigma_1):
        x = simulate(model, u, model.mu, np.zeros((u.shape[0], model.n_w)))
        return float(_gaussian_logpdf_rows(y - x @ model.C.T - u @ model.D.T, model.Sigma_v))
    return kalman_filter(model, u, y).loglik


def _backward_pass(model, filt):
    """Smoothing recursion on the predictive-form filter; no matrix inversion of P."""
    T, n_x = filt.x_pred.shape
    A, C = model.A, model.C
    r = np.zeros(n_x)
    N = np.zeros((n_x, n_x))
    mean = np.empty((T, n_x))
    cov = np.empty((T, n_x, n_x))
    N_next = np.empty((T, n_x, n_x))
    Ls = np.empty((T, n_x, n_x))
    for t in range(T - 1, -1, -1):
        S = filt.S[t]
        Ls[t] = A - A @ filt.gain[t] @ C
        N_next[t] = N
        CSinv = np.linalg.solve(S, C).T
        r = CSinv @ filt.innov[t] + Ls[t].T @ r
        N = _sym(CSinv @ C + Ls[t].T @ N @ Ls[t])
        P = filt.P_pred[t]
        mean[t] = filt.x_pred[t] + P @ r
        cov[t] = _sym(P - P @ N @ P)
    cross = np.empty((max(T - 1, 0), n_x, n_x))
    I = np.eye(n_x)
    for t in range(T - 1):
        cross[t] = (I - filt.P_pred[t + 1] @ N_next[t]) @ Ls[t] @ filt.P_pred[t]
    return SmoothedStates(mean, cov, cross)


def rts_smoother(model, u, y):
    filt = kalman_filter(model, u, y)
    return _backward_pass(model, filt)


def _posterior_from_moments(model, u, y, Z_mean, Omega):
    n_x, n_w = model.n_x, model.n_w
    T = u.shape[0]
    Omega = _sym(Omega)
    W2 = np.empty((T, n_w, n_w))
    w_mean = Z_mean[n_x:].reshape(-1, n_w)
    for t in range(T - 1):
        s = slice(n_x + t * n_w, n_x + (t + 1) * n_w)
        W2[t] = _sym(Omega[s, s] + np.outer(w_mean[t], w_mean[t]))
    W2[T - 1] = model.Sigma_w
    w = np.zeros((T, n_w))
    w[:-1] = w_mean
    x = simulate(model, u, Z_mean[:n_x], w)
    Delta = (y - x @ model.C.T - u @ model.D.T).ravel()
    return SmoothedPosterior(Z_mean[:n_x].copy(), Omega[:n_x, :n_x].copy(), Z_mean, Omega, W2, Delta)


def disturbance_smoother(model, u, y):
    """Joint smoothing distribution of ``Z = vec([x_1, w_1..w_{T-1}])``.

    Accumulates ``Cov[Z, e_t] S_t^-1`` over the filter innovations ``e_t``,
    which are mutually independent; ``Cov[Z, x_t - xhat_t]`` is propagated
    forward with the closed-loop matrix ``A - A K_t C``. Zero prior
    covariances yield an exact Dirac posterior without any inversion.
    """
    u, y = _check_inputs(model, u, y)
    T = u.shape[0]
    n_x, n_w = model.n_x, model.n_w
    filt = kalman_filter(model, u, y)
    A, C = model.A, model.C
    n_z = n_x + (T - 1) * n_w
    Z_mean = np.zeros(n_z)
    Z_mean[:n_x] = model.mu
    Omega = np.zeros((n_z, n_z))
    Omega[:n_x, :n_x] = model.Sigma_1
    for t in range(T - 1):
        s = slice(n_x + t * n_w, n_x + (t + 1) * n_w)
        Omega[s, s] = model.Sigma_w
    Xi = np.zeros((n_z, n_x))
    Xi[:n_x] = model.Sigma_1
    GSw = model.Sigma_w @ model.G.T
    for t in range(T):
        U = Xi @ C.T
        c = linalg.cho_factor(filt.S[t], lower=True)
        Z_mean += U @ linalg.cho_solve(c, filt.innov[t])
        Omega -= U @ linalg.cho_solve(c, U.T)
        if t < T - 1:
            Xi = Xi @ (A - A @ filt.gain[t] @ C).T
            Xi[n_x + t * n_w: n_x + (t + 1) * n_w] += GSw
    return _posterior_from_moments(model, u, y, Z_mean, Omega)


def lifted_conditioning_oracle(model, u, y):
    """Dense conditioning of the stacked Gaussian; returns ``(posterior, loglik)``."""
    u, y = _check_inputs(model, u, y)
    T = u.shape[0]
    if T > MAX_ORACLE_T:
        raise ValueError(f"horizon {T} exceeds the oracle limit of {MAX_ORACLE_T}")
    n_x = model.n_x
    Fbar, Gbar, Cbar, Dbar, SY = lift_explicit(model, T)
    n_z = Fbar.shape[1]
    Z0 = np.zeros(n_z)
    Z0[:n_x] = model.mu
    Omega0 = linalg.block_diag(model.Sigma_1, *([model.Sigma_w] * (T - 1)))
    CF = Cbar @ Fbar
    Y = y.ravel()
    mean_Y = CF @ Z0 + (Cbar @ Gbar + Dbar) @ u.ravel()
    cross = Omega0 @ CF.T
    S_Y = _sym(CF @ cross + SY)
    c = linalg.cho_factor(S_Y, lower=True)
    resid = Y - mean_Y
    Z_mean = Z0 + cross @ linalg.cho_solve(c, resid)
    Omega = Omega0 - cross @ linalg.cho_solve(c, cross.T)
    loglik = -0.5 * (Y.size * LOG2PI + 2.0 * np.log(np.diag(c[0])).sum() + resid @ linalg.cho_solve(c, resid))
    return _posterior_from_moments(model, u, y, Z_mean, Omega), float(loglik)
