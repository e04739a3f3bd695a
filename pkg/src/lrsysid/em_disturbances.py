"""EM with the initial state and the disturbances as latent variables.

The E-step is the joint smoothing distribution of ``Z = vec([x_1, w_1..w_{T-1}])``.
The auxiliary function splits into three terms that depend on disjoint
parameter groups::

    Q1(mu, Sigma_1)   initial-state term, maximized in closed form
    Q2(Sigma_w)       disturbance term, maximized in closed form
    Q3(Sigma_v, A, B, G, C, D)
        = -1/2 [sum_j E_j + T log det Sigma_v + T n_y log 2 pi]

where ``E_0`` is the simulation error of the smoothed mean and ``E_j``,
``j >= 1``, are simulation errors of zero-data instances built from a
rank-one split of the posterior covariance. ``Q3`` is increased through the
convex bound of :mod:`lrsysid.relaxation`, which also keeps every iterate
stable.

All ``Q`` values here are on the true log-density scale, so that
``L(theta) - L(theta_k) >= Q(theta, theta_k) - Q(theta_k, theta_k)``.
"""

from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .inference import LOG2PI, disturbance_smoother, is_dirac, log_likelihood
from .model import (
    CertificateError,
    ExplicitModel,
    ImplicitModel,
    make_random_stable_system,
    simulate,
    spectral_radius,
    to_explicit,
)
from .relaxation import (
    ColumnSet,
    MStepConfig,
    MStepError,
    NotCertifiablyStableError,
    SimErrorInstance,
    _simulate_columns,
    lyapunov_certificate,
    prepare_multipliers,
    solve_mstep_sdp,
)

__all__ = [
    "EStepBundle",
    "EMRecord",
    "EMHistory",
    "estep",
    "rank_one_decompose",
    "q_terms",
    "q_eval",
    "mstep_alpha",
    "mstep_beta",
    "default_initial_model",
    "em_dist_run",
]

log = logging.getLogger(__name__)

RANK_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class EStepBundle:
    """Everything the M-step needs from one E-step.

    ``instances[0]`` carries the data with the smoothed means; the others
    carry zero data and one rank-one factor of the posterior covariance each.
    """

    posterior: object
    Sigma_w_hat: np.ndarray
    rank_one_terms: list
    instances: list
    u: np.ndarray
    y: np.ndarray
    loglik: float

    @property
    def T(self):
        return self.u.shape[0]

    def columns(self):
        return ColumnSet.from_instances(self.instances)


def rank_one_decompose(Omega, tol=RANK_TOL):
    """Vectors ``omega_j`` with ``Omega = sum_j omega_j omega_j'``.

    Uses the eigenpairs whose eigenvalue exceeds ``tol * lambda_max``, so the
    number of terms is the numerical rank.
    """
    Omega = np.asarray(Omega, dtype=float)
    if Omega.ndim != 2 or Omega.shape[0] != Omega.shape[1]:
        raise ValueError("Omega must be a square matrix")
    scale = max(1.0, np.abs(Omega).max(initial=0.0))
    if np.abs(Omega - Omega.T).max(initial=0.0) > 1e-10 * scale:
        raise ValueError("Omega must be symmetric")
    if not Omega.size:
        return []
    lam, V = np.linalg.eigh(0.5 * (Omega + Omega.T))
    top = lam[-1]
    if top <= 0.0:
        return []
    keep = np.nonzero(lam > tol * top)[0][::-1]
    return [V[:, i] * np.sqrt(lam[i]) for i in keep]


def _split(omega, n_x, n_w, T):
    w = np.zeros((T, n_w))
    w[:-1] = omega[n_x:].reshape(T - 1, n_w)
    return omega[:n_x], w


def estep(model: ExplicitModel, u, y):
    """Smoothing pass at ``model`` followed by the rank-one split of the posterior covariance."""
    u = np.asarray(u, dtype=float).reshape(len(u), -1)
    y = np.asarray(y, dtype=float).reshape(len(y), -1)
    post = disturbance_smoother(model, u, y)
    T = u.shape[0]
    Sigma_w_hat = post.W2.mean(axis=0)
    Sigma_w_hat = 0.5 * (Sigma_w_hat + Sigma_w_hat.T)
    terms = rank_one_decompose(post.Omega)
    instances = [SimErrorInstance(u, y, post.x1_mean.copy(), post.w_mean)]
    for om in terms:
        x1, w = _split(om, model.n_x, model.n_w, T)
        instances.append(SimErrorInstance.zero_data(x1, w, model.n_u, model.n_y))
    return EStepBundle(post, Sigma_w_hat, terms, instances, u, y, log_likelihood(model, u, y))


def mstep_alpha(bundle: EStepBundle):
    """Maximizer of ``Q1``: the smoothed initial-state moments ``(mu, Sigma_1)``."""
    post = bundle.posterior
    return post.x1_mean.copy(), 0.5 * (post.x1_cov + post.x1_cov.T)


def mstep_beta(bundle: EStepBundle):
    """Maximizer of ``Q2``: the average smoothed disturbance second moment."""
    return bundle.Sigma_w_hat.copy()


def _zero_tol(M):
    return 1e-12 * max(1.0, float(np.abs(M).max(initial=0.0)))


def _gaussian_term(Sigma, second_moments, n_terms, label):
    """``-1/2 sum_t [n log 2 pi + log det Sigma + tr(Sigma^-1 S_t)]`` with the Dirac rule for ``Sigma = 0``."""
    total_S = second_moments.sum(axis=0)
    if is_dirac(Sigma):
        return 0.0 if np.abs(total_S).max(initial=0.0) <= _zero_tol(total_S) else -np.inf
    n = Sigma.shape[0]
    sign, logdet = np.linalg.slogdet(Sigma)
    if sign <= 0:
        raise ValueError(f"{label} must be positive definite or exactly zero")
    return -0.5 * (n_terms * (n * LOG2PI + logdet) + float(np.sum(np.linalg.solve(Sigma, total_S).diagonal())))


def _q3_sum(gamma, bundle: EStepBundle):
    """``sum_j E_j`` over all instances, evaluated by vectorized simulation."""
    cols = bundle.columns()
    X = _simulate_columns(gamma.A, gamma.B, gamma.G, cols)
    R = cols.y - np.matmul(gamma.C, X) - np.matmul(gamma.D, cols.u)
    W = np.linalg.solve(gamma.Sigma_v, R.transpose(0, 2, 1).reshape(-1, R.shape[1]).T)
    return float(np.sum(R.transpose(0, 2, 1).reshape(-1, R.shape[1]).T * W))


def q3_value(gamma, bundle: EStepBundle):
    T, n_y = bundle.T, gamma.C.shape[0]
    logdet = np.linalg.slogdet(gamma.Sigma_v)[1]
    return -0.5 * (_q3_sum(gamma, bundle) + T * logdet + T * n_y * LOG2PI)


def q_terms(theta: ExplicitModel, bundle: EStepBundle):
    """``(Q1, Q2, Q3)`` of ``theta`` for the posterior stored in ``bundle``."""
    post = bundle.posterior
    d = post.x1_mean - theta.mu
    S1 = (post.x1_cov + np.outer(d, d))[None]
    q1 = _gaussian_term(theta.Sigma_1, S1, 1, "Sigma_1")
    q2 = _gaussian_term(theta.Sigma_w, post.W2, bundle.T, "Sigma_w")
    return q1, q2, q3_value(theta.gamma, bundle)


def q_eval(theta: ExplicitModel, bundle: EStepBundle):
    return float(sum(q_terms(theta, bundle)))


# ------------------------------------------------------------------- driver

def default_initial_model(dims, u, y, seed=0, sigma_w=None, radius=0.5):
    """Random stable dynamics (spectral radius ``radius``) with the output map fitted by least squares.

    ``(A, B)`` are drawn at random; ``(C, D)`` regress the outputs on the
    noiseless simulated states and the inputs. ``Sigma_v`` is the residual
    variance and ``Sigma_w``, ``Sigma_1`` are 1% and 100% of the simulated
    state variance, so every start has a finite likelihood of sensible scale.
    A given ``sigma_w`` sets ``Sigma_w = sigma_w * I`` instead.
    """
    u = np.asarray(u, dtype=float).reshape(len(u), -1)
    y = np.asarray(y, dtype=float).reshape(len(y), -1)
    base = make_random_stable_system(dims, radius, seed, sigma_1=1.0, sigma_w=1.0, sigma_v=1.0,
                                     G=np.eye(dims.n_x)[:, :dims.n_w])
    x = simulate(base, u, np.zeros(dims.n_x), np.zeros((len(u), dims.n_w)))
    Z = np.hstack([x, u])
    CD = np.linalg.lstsq(Z, y, rcond=None)[0].T
    res = y - Z @ CD.T
    y_var = float(np.mean(np.var(y, axis=0)))
    y_var = y_var if y_var > 0 else 1.0
    sv = max(float(np.mean(res ** 2)), 1e-6 * y_var)
    x_var = float(np.mean(np.var(x, axis=0)))
    x_var = x_var if x_var > 0 else 1.0
    sw = 0.01 * x_var if sigma_w is None else float(sigma_w)
    return base.replace(Sigma_1=x_var * np.eye(dims.n_x), Sigma_w=sw * np.eye(dims.n_w),
                        Sigma_v=sv * np.eye(dims.n_y), C=CD[:, :dims.n_x], D=CD[:, dims.n_x:])


@dataclass(frozen=True)
class EMRecord:
    iter: int
    loglik: float
    spectral_radius: float
    solver_status: str
    wall_ms: float


@dataclass
class EMHistory:
    records: list = field(default_factory=list)
    models: list = field(default_factory=list)
    converged: bool = False
    error: str | None = None

    @property
    def final(self):
        return self.models[-1]

    @property
    def logliks(self):
        return np.array([r.loglik for r in self.records])

    def to_csv(self, timing=False):
        out = io.StringIO()
        wr = csv.writer(out, lineterminator="\n")
        wr.writerow(["iter", "loglik", "spectral_radius", "solver_status", "wall_ms"])
        for r in self.records:
            wall = f"{r.wall_ms:.3f}" if timing else "NA"
            wr.writerow([r.iter, f"{r.loglik:.12g}", f"{r.spectral_radius:.12g}", r.solver_status, wall])
        return out.getvalue()


def _stop(prev, cur, delta):
    return abs(cur - prev) < delta


def _update_gamma(theta_k, bundle, config):
    """One certified update of ``(Sigma_v, A, B, G, C, D)``; returns the new gamma and a status."""
    P0 = lyapunov_certificate(theta_k.A, theta_k.C, theta_k.Sigma_v)[1]
    eta_k = ImplicitModel.from_explicit(theta_k, P0)
    groups = prepare_multipliers(eta_k, bundle.columns(), config)
    res = solve_mstep_sdp(eta_k, groups, theta_k.Sigma_v, bundle.T, config)
    if res.status == "kept" or res.eta is eta_k:
        return theta_k.gamma, res.status
    gamma = to_explicit(res.eta)
    # The relaxation bound guarantees this; the direct check guards against solver inaccuracy.
    if q3_value(gamma, bundle) < q3_value(theta_k.gamma, bundle):
        return theta_k.gamma, "kept"
    return gamma, res.status


def em_dist_run(theta0: ExplicitModel, u, y, *, max_iters=500, delta=1e-4,
                config: MStepConfig | None = None, callback=None):
    """EM with latent disturbances.

    Each iteration runs the E-step, the closed-form updates of
    ``(mu, Sigma_1)`` and ``Sigma_w``, and the certified convex update of
    the remaining parameters. It stops once the log-likelihood changes by
    less than ``delta`` or after ``max_iters`` iterations. A failed convex
    update ends the run, keeps the last iterate and records the reason in
    ``history.error``.
    """
    config = config or MStepConfig()
    u = np.asarray(u, dtype=float).reshape(len(u), -1)
    y = np.asarray(y, dtype=float).reshape(len(y), -1)
    L0 = log_likelihood(theta0, u, y)
    if not np.isfinite(L0):
        raise ValueError("initial model has non-finite log-likelihood")
    hist = EMHistory()
    hist.records.append(EMRecord(0, L0, spectral_radius(theta0.A), "init", 0.0))
    hist.models.append(theta0)
    theta, L = theta0, L0
    for k in range(1, max_iters + 1):
        t0 = time.perf_counter()
        bundle = estep(theta, u, y)
        mu, Sigma_1 = mstep_alpha(bundle)
        Sigma_w = mstep_beta(bundle)
        try:
            gamma, status = _update_gamma(theta, bundle, config)
        except (MStepError, NotCertifiablyStableError, CertificateError, np.linalg.LinAlgError) as exc:
            hist.error = f"iteration {k}: {exc}"
            log.warning("convex update failed, keeping the current iterate: %s", exc)
            break
        new = ExplicitModel(mu, Sigma_1, Sigma_w, gamma.Sigma_v, gamma.A, gamma.B, gamma.G, gamma.C, gamma.D)
        L_new = log_likelihood(new, u, y)
        wall = 1e3 * (time.perf_counter() - t0)
        hist.records.append(EMRecord(k, L_new, spectral_radius(new.A), status, wall))
        hist.models.append(new)
        if callback is not None:
            callback(k, new, L_new)
        done = _stop(L, L_new, delta)
        theta, L = new, L_new
        if done:
            hist.converged = True
            break
    return hist
