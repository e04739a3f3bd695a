"""Lagrangian relaxation of the simulation error and the convex parameter update.

For an implicit model ``E x[t+1] = F x[t] + K u[t] + L w[t]`` the dynamics
constraint over a horizon is ``Fi @ X + eps = 0`` (see :mod:`lrsysid.lifted`).
With the state-affine multiplier ``lam = 2 (Lam X + h)``, ``Lam = I_T (x) H``,
the relaxed simulation error

    Jhat(eta) = sup_X  |Y - Cbar X - Dbar U|^2_{Sigma_Y^-1} - lam' (Fi X + eps)

is convex in ``eta`` and bounds the simulation error of ``E^-1 (F, K, L)``
from above. Writing ``Psi = Lam'Fi + Fi'Lam - Cbar' Sigma_Y^-1 Cbar`` (positive
definite on the stability set) and ``b = Cbar' Sigma_Y^-1 r + Lam' eps + Fi' h``
with ``r = Y - Dbar U``::

    Jhat = b' Psi^-1 b + r' Sigma_Y^-1 r - 2 h' eps,   argmax X = -Psi^-1 b.

Two numerical routes share these definitions. The dense helpers below act
on single instances and serve as oracles; the production path treats many
instances at once as columns of a block-tridiagonal matrix-fractional
program (:mod:`lrsysid.barrier`), with a conic formulation
(:mod:`lrsysid.sdp`) available for small horizons.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy import linalg

from . import sdp
from .barrier import linearize, solve_barrier
from .blocktri import BlockTriCholesky
from .lifted import implicit_offset, lift_implicit
from .model import CertificateError, ImplicitModel, spectral_radius, to_explicit

__all__ = [
    "UnboundedSupremumError",
    "NotCertifiablyStableError",
    "MStepError",
    "Multiplier",
    "SimErrorInstance",
    "ColumnSet",
    "MultiplierGroup",
    "MStepConfig",
    "MStepResult",
    "simulation_error",
    "concavity_matrix",
    "jlambda",
    "jhat_closed_form",
    "relaxation_maximizer",
    "compute_h",
    "compute_h_columns",
    "stability_lmi",
    "stability_margin",
    "cross_term_bound",
    "lyapunov_certificate",
    "epigraph_matrix",
    "epigraph_lmi",
    "fit_multiplier_H",
    "prepare_multipliers",
    "qhat",
    "solve_mstep_sdp",
]

log = logging.getLogger(__name__)


class UnboundedSupremumError(ValueError):
    """The relaxed objective is not concave in the states, so its supremum is infinite."""


class NotCertifiablyStableError(ValueError):
    """No multiplier/certificate pair places the model in the stability set."""


class MStepError(RuntimeError):
    """Parameter update failed; ``eta_k`` holds the retained iterate."""

    def __init__(self, message, eta_k=None, status="failure"):
        super().__init__(message)
        self.eta_k = eta_k
        self.status = status


@dataclass(frozen=True, eq=False)
class Multiplier:
    H: np.ndarray
    h: np.ndarray | None = None     # length T * n_x; ``None`` means zero

    def offset(self, T, n_x):
        return np.zeros(T * n_x) if self.h is None else np.asarray(self.h, dtype=float)


@dataclass(frozen=True, eq=False)
class SimErrorInstance:
    u: np.ndarray       # (T, n_u)
    y: np.ndarray       # (T, n_y)
    x1: np.ndarray      # (n_x,)
    w: np.ndarray       # (T, n_w)

    @property
    def T(self):
        return self.u.shape[0]

    @classmethod
    def zero_data(cls, x1, w, n_u, n_y):
        w = np.asarray(w, dtype=float)
        T = w.shape[0]
        return cls(np.zeros((T, n_u)), np.zeros((T, n_y)), np.asarray(x1, dtype=float), w)


def _gamma(params):
    return to_explicit(params) if isinstance(params, ImplicitModel) else params


def _simulate(g, inst):
    T = inst.T
    x = np.empty((T, g.A.shape[0]))
    x[0] = inst.x1
    drive = inst.u @ g.B.T + inst.w @ g.G.T
    for t in range(T - 1):
        x[t + 1] = g.A @ x[t] + drive[t]
    return x


def simulation_error(params, inst):
    """``sum_t |y_t - C x_t - D u_t|^2`` in the ``Sigma_v^-1`` norm along the noiseless simulation."""
    g = _gamma(params)
    x = _simulate(g, inst)
    res = inst.y - x @ g.C.T - inst.u @ g.D.T
    return float(np.einsum("ti,ti->", res, np.linalg.solve(g.Sigma_v, res.T).T))


# ---------------------------------------------------------------- dense oracles

def _dense(eta, H, inst):
    T = inst.T
    Fi = lift_implicit(eta.E, eta.F, T)
    eps = implicit_offset(eta.E, eta.K, eta.L, inst.u, inst.x1, inst.w)
    I_T = np.eye(T)
    Cbar = np.kron(I_T, eta.C)
    Sinv = np.kron(I_T, np.linalg.inv(eta.Sigma_v))
    Lam = np.kron(I_T, H)
    r = (inst.y - inst.u @ eta.D.T).ravel()
    Psi = Lam.T @ Fi + Fi.T @ Lam - Cbar.T @ Sinv @ Cbar
    return Fi, eps, Cbar, Sinv, Lam, r, 0.5 * (Psi + Psi.T)


def concavity_matrix(eta, H, T):
    """``Lam'Fi + Fi'Lam - Cbar' Sigma_Y^-1 Cbar``; the supremum is finite iff this is positive definite."""
    u = np.zeros((T, eta.K.shape[1]))
    inst = SimErrorInstance(u, np.zeros((T, eta.C.shape[0])), np.zeros(eta.E.shape[0]),
                            np.zeros((T, eta.L.shape[1])))
    return _dense(eta, H, inst)[-1]


def jlambda(eta, mult, inst, X):
    """Relaxed objective at a state sequence ``X`` (shape ``(T, n_x)``)."""
    Fi, eps, Cbar, Sinv, Lam, r, _ = _dense(eta, mult.H, inst)
    X = np.asarray(X, dtype=float).ravel()
    res = r - Cbar @ X
    lam = 2.0 * (Lam @ X + mult.offset(inst.T, eta.E.shape[0]))
    return float(res @ Sinv @ res - lam @ (Fi @ X + eps))


def _closed_form_parts(eta, mult, inst):
    Fi, eps, Cbar, Sinv, Lam, r, Psi = _dense(eta, mult.H, inst)
    h = mult.offset(inst.T, eta.E.shape[0])
    try:
        cf = linalg.cho_factor(Psi, lower=True)
    except linalg.LinAlgError:
        raise UnboundedSupremumError("relaxed objective is not concave in the states") from None
    b = Cbar.T @ Sinv @ r + Lam.T @ eps + Fi.T @ h
    return cf, b, r, Sinv, h, eps


def jhat_closed_form(eta, mult, inst):
    cf, b, r, Sinv, h, eps = _closed_form_parts(eta, mult, inst)
    return float(b @ linalg.cho_solve(cf, b) + r @ Sinv @ r - 2.0 * h @ eps)


def relaxation_maximizer(eta, mult, inst):
    """State sequence attaining the supremum, shape ``(T, n_x)``."""
    cf, b, *_ = _closed_form_parts(eta, mult, inst)
    return (-linalg.cho_solve(cf, b)).reshape(inst.T, -1)


def compute_h(eta_k, H, inst):
    """Offset making the relaxation tight at ``eta_k``: its maximizer is the simulated trajectory."""
    Fi, eps, Cbar, Sinv, Lam, r, Psi = _dense(eta_k, H, inst)
    if np.linalg.cond(eta_k.E) > 1e12:
        raise CertificateError("E is numerically singular")
    Xs = _simulate(to_explicit(eta_k), inst).ravel()
    rhs = -Psi @ Xs - Cbar.T @ Sinv @ r - Lam.T @ eps
    return linalg.solve_triangular(Fi.T, rhs, lower=False)


def stability_lmi(eta, H, P=None):
    """The symmetric matrix ``M(eta, H)`` of side ``2 n_x + n_y``; stability set is ``M > 0``."""
    P = eta.P if P is None else P
    E, F, C = eta.E, eta.F, eta.C
    HF = H.T @ F
    n_x, n_y = E.shape[0], C.shape[0]
    Z = np.zeros((n_x, n_y))
    M = np.block([
        [H.T @ E + E.T @ H - P, HF.T, C.T],
        [HF, P, Z],
        [C, Z.T, eta.Sigma_v],
    ])
    return 0.5 * (M + M.T)


def cross_term_bound(x, x_next, H, F, P):
    """Both sides of ``2 x_next' H' F x <= |x_next|_P^2 + |H' F x|_{P^-1}^2`` for ``P > 0``.

    This completion-of-squares step turns the stability LMI into a bound on
    the cross terms of the relaxed objective. Equality holds at
    ``x_next = P^-1 H' F x``. Returns ``(lhs, rhs)``.
    """
    v = H.T @ F @ x
    lhs = 2.0 * float(x_next @ v)
    rhs = float(x_next @ P @ x_next + v @ np.linalg.solve(P, v))
    return lhs, rhs


def stability_margin(eta, H, P=None):
    return float(np.linalg.eigvalsh(stability_lmi(eta, H, P))[0])


def lyapunov_certificate(A, C, Sigma_v, margin=2.0):
    """A pair ``(H, P)`` with ``M(eta, H) > 0`` for ``eta = (I, A, ., ., C, ., Sigma_v)``.

    ``H = P = alpha X`` with ``X - A'XA = I`` gives the Schur complement
    ``alpha I - C' Sigma_v^-1 C``; ``alpha`` is a multiple of its largest eigenvalue.
    """
    if spectral_radius(A) >= 1.0:
        raise NotCertifiablyStableError("spectral radius is not below one")
    X = linalg.solve_discrete_lyapunov(A.T, np.eye(A.shape[0]))
    X = 0.5 * (X + X.T)
    cc = float(np.linalg.eigvalsh(C.T @ np.linalg.solve(Sigma_v, C))[-1])
    alpha = margin * cc + 1e-3 * max(cc, 1.0) + 1e-12
    return alpha * X, alpha * X


def epigraph_matrix(eta, mult, inst, s):
    """``N(eta, s)``; positive semidefinite exactly when ``s >= Jhat(eta)``."""
    T = inst.T
    Fi = lift_implicit(eta.E, eta.F, T)
    eps = implicit_offset(eta.E, eta.K, eta.L, inst.u, inst.x1, inst.w)
    Lam = np.kron(np.eye(T), mult.H)
    Cbar = np.kron(np.eye(T), eta.C)
    SY = np.kron(np.eye(T), eta.Sigma_v)
    h = mult.offset(T, eta.E.shape[0])
    r = (inst.y - inst.u @ eta.D.T).ravel()
    bx = Lam.T @ eps + Fi.T @ h
    N = np.block([
        [np.array([[s + 2.0 * h @ eps]]), bx[None, :], r[None, :]],
        [bx[:, None], Lam.T @ Fi + Fi.T @ Lam, -Cbar.T],
        [r[:, None], -Cbar, SY],
    ])
    return 0.5 * (N + N.T)


def epigraph_lmi(inst, mult, *, estimate_D=True, D=None, extra=()):
    """Affine PSD constraint in ``(E, F, K, L, C, D, Sigma_v, s)``.

    Returns ``(layout, program)`` where ``program`` is a
    :class:`~lrsysid.sdp.ConicProgram` with a single PSD block
    ``N(eta, s)``; ``layout`` maps variable names to slices.
    """
    n_x = mult.H.shape[0]
    n_u, n_y, n_w = inst.u.shape[1], inst.y.shape[1], inst.w.shape[1]
    lay = Layout(_eta_entries(n_x, n_u, n_y, n_w, estimate_D) + [("s", (1, 1), False)] + list(extra))
    fixed_D = D if not estimate_D else None

    def build(z):
        v = lay.unpack(z)
        eta = _EtaView(v, fixed_D)
        return [epigraph_matrix(eta, mult, inst, v["s"][0, 0])]

    prog = conic_from_affine(build, lay.size, np.zeros(lay.size))
    return lay, prog


# --------------------------------------------------------- variable layouts

class Layout:
    """Packs named matrix blocks into a flat vector; symmetric blocks store their upper triangle."""

    def __init__(self, entries):
        self.entries = []
        off = 0
        for name, shape, sym in entries:
            n = shape[0] * (shape[0] + 1) // 2 if sym else shape[0] * shape[1]
            self.entries.append((name, shape, sym, slice(off, off + n)))
            off += n
        self.size = off

    def unpack(self, z):
        out = {}
        for name, shape, sym, sl in self.entries:
            seg = z[sl]
            if sym:
                n = shape[0]
                M = np.zeros((n, n))
                M[np.triu_indices(n)] = seg
                out[name] = M + np.triu(M, 1).T
            else:
                out[name] = seg.reshape(shape)
        return out

    def pack(self, values):
        z = np.zeros(self.size)
        for name, shape, sym, sl in self.entries:
            M = np.asarray(values[name], dtype=float)
            z[sl] = M[np.triu_indices(shape[0])] if sym else M.ravel()
        return z

    def slice_of(self, name):
        for n, _, _, sl in self.entries:
            if n == name:
                return sl
        raise KeyError(name)


def _eta_entries(n_x, n_u, n_y, n_w, estimate_D=True):
    entries = [("E", (n_x, n_x), False), ("F", (n_x, n_x), False), ("K", (n_x, n_u), False),
               ("L", (n_x, n_w), False), ("C", (n_y, n_x), False)]
    if estimate_D:
        entries.append(("D", (n_y, n_u), False))
    entries.append(("Sigma_v", (n_y, n_y), True))
    return entries


class _EtaView:
    """Lightweight attribute view of unpacked variables (no validation, may be indefinite)."""

    def __init__(self, v, D=None):
        self.__dict__.update(v)
        if "D" not in v:
            self.D = D


def conic_from_affine(build, n, c, A_eq=None, b_eq=None):
    """ConicProgram from a function returning a list of symmetric matrices affine in ``z``."""
    base = build(np.zeros(n))
    blocks = [dict() for _ in base]
    for i in range(n):
        z = np.zeros(n)
        z[i] = 1.0
        for k, (M, M0) in enumerate(zip(build(z), base)):
            dM = M - M0
            if np.any(dM):
                blocks[k][i] = sp.csr_matrix(dM)
    prog = sdp.ConicProgram(n, np.asarray(c, dtype=float), A_eq=A_eq, b_eq=b_eq)
    for M0, bl in zip(base, blocks):
        prog.add_psd(M0, bl)
    return prog


# ------------------------------------------------------------ column sets

@dataclass(frozen=True, eq=False)
class ColumnSet:
    """Simulation-error instances stored side by side: ``x1 (n_x, k)``, series ``(T, n, k)``."""

    x1: np.ndarray
    u: np.ndarray
    y: np.ndarray
    w: np.ndarray

    @property
    def k(self):
        return self.x1.shape[1]

    @property
    def T(self):
        return self.u.shape[0]

    @classmethod
    def from_instances(cls, instances):
        return cls(
            np.stack([i.x1 for i in instances], axis=-1),
            np.stack([i.u for i in instances], axis=-1),
            np.stack([i.y for i in instances], axis=-1),
            np.stack([i.w for i in instances], axis=-1),
        )

    @classmethod
    def concat(cls, sets):
        return cls(*(np.concatenate([getattr(s, f) for s in sets], axis=-1) for f in ("x1", "u", "y", "w")))

    def instance(self, j):
        return SimErrorInstance(self.u[..., j], self.y[..., j], self.x1[:, j], self.w[..., j])

    def select(self, idx):
        idx = np.atleast_1d(idx)
        return ColumnSet(self.x1[:, idx], self.u[..., idx], self.y[..., idx], self.w[..., idx])


def _simulate_columns(A, B, G, cols):
    X = np.empty((cols.T, A.shape[0], cols.k))
    X[0] = cols.x1
    for t in range(cols.T - 1):
        X[t + 1] = A @ X[t] + B @ cols.u[t] + G @ cols.w[t]
    return X


def _eps_columns(E, K, L, cols):
    eps = np.empty((cols.T, E.shape[0], cols.k))
    eps[0] = -E @ cols.x1
    eps[1:] = -(np.matmul(K, cols.u[:-1]) + np.matmul(L, cols.w[:-1]))
    return eps


def compute_h_columns(eta_k, H, cols):
    """Column-batched :func:`compute_h` using the banded structure; returns ``(T, n_x, k)``."""
    E, F, C = eta_k.E, eta_k.F, eta_k.C
    if np.linalg.cond(E) > 1e12:
        raise CertificateError("E is numerically singular")
    g = to_explicit(eta_k)
    X = _simulate_columns(g.A, g.B, g.G, cols)
    SinvC = np.linalg.solve(eta_k.Sigma_v, C)
    Dg = H.T @ E + E.T @ H - C.T @ SinvC
    HF = H.T @ F
    PsiX = np.matmul(Dg, X)
    PsiX[1:] -= np.matmul(HF, X[:-1])
    PsiX[:-1] -= np.matmul(HF.T, X[1:])
    r = cols.y - np.matmul(eta_k.D, cols.u)
    v = -PsiX - np.matmul(SinvC.T, r) - np.matmul(H.T, _eps_columns(E, eta_k.K, eta_k.L, cols))
    h = np.empty_like(v)
    Et = E.T
    h[-1] = np.linalg.solve(Et, v[-1])
    for t in range(cols.T - 2, -1, -1):
        h[t] = np.linalg.solve(Et, v[t] + F.T @ h[t + 1])
    return h


def _psi_blocks(H, E, F, C, Sigma_v):
    n_x = E.shape[0]
    D = np.block([[H.T @ E + E.T @ H, -C.T], [-C, Sigma_v]])
    S = np.zeros_like(D)
    S[:n_x, :n_x] = -H.T @ F
    return 0.5 * (D + D.T), S


def _btilde(H, E, F, K, L, D, cols, h):
    """Columns ``[Lam'eps + Fi'h ; r]`` interleaved per time step, shape ``(T, n_x + n_y, k)``; plus ``-2 h'eps``."""
    eps = _eps_columns(E, K, L, cols)
    bx = np.matmul(H.T, eps)
    lin = 0.0
    if h is not None:
        bx += np.matmul(E.T, h)
        bx[:-1] -= np.matmul(F.T, h[1:])
        lin = -2.0 * float(np.einsum("tak,tak->", h, eps))
    by = cols.y - np.matmul(D, cols.u)
    return np.concatenate([bx, by], axis=1), lin


# --------------------------------------------------------------- multipliers

@dataclass(eq=False)
class MultiplierGroup:
    """Instances sharing one multiplier matrix ``H`` and certificate ``P``."""

    columns: ColumnSet
    H: np.ndarray
    P: np.ndarray
    h: np.ndarray | None = None
    fit_value: float = np.nan
    fit_status: str = ""

    def multiplier(self, j):
        h = None if self.h is None else self.h[..., j].ravel()
        return Multiplier(self.H, h)


@dataclass(frozen=True)
class MStepConfig:
    """Options of the convex parameter update.

    ``method`` is ``"barrier"`` (structured interior point, default) or
    ``"sdp"`` (dense conic program solved by the generic backend; small
    horizons only). ``share_multiplier`` fits one ``H`` on the summed bound
    of all instances instead of one per instance.

    ``scale_cap`` bounds the spectral norm of ``[E F K L]`` by that multiple
    of its current value. Scaling the implicit dynamics by a constant leaves
    the explicit model unchanged, and the bound can be flat along such rays;
    the cap keeps the feasible set bounded without affecting ordinary steps.
    """

    method: str = "barrier"
    share_multiplier: bool = True
    estimate_D: bool = True
    sigma_v_floor: float = 1e-8
    strict_margin: float = 1e-9
    gap_tol: float = 1e-6
    fit_gap_tol: float = 1e-4
    barrier_mu: float = 50.0
    max_newton: int = 150
    stage_newton: int = 15
    ftol: float = 1e-6
    sdp_tol: float = 1e-9
    scale_cap: float = 100.0

    def __post_init__(self):
        if self.method not in ("barrier", "sdp"):
            raise ValueError(f"unknown M-step method {self.method!r}")


def _fit_builder(eta_k, cols, n_x):
    lay = Layout([("Phi", (n_x, n_x), False), ("P", (n_x, n_x), True)])
    E, F, C, Sv = eta_k.E, eta_k.F, eta_k.C, eta_k.Sigma_v

    def build(z):
        v = lay.unpack(z)
        Phi = v["Phi"]
        D, S = _psi_blocks(Phi, E, F, C, Sv)
        B, _ = _btilde(Phi, E, F, eta_k.K, eta_k.L, eta_k.D, cols, None)
        return [(D, S, B)], [stability_lmi(eta_k, Phi, v["P"])], 0.0

    return lay, build


def fit_multiplier_H(eta_k, instances, config: MStepConfig | None = None):
    """Minimize the offset-free relaxation over ``(H, P)`` subject to ``M(eta_k, H) > 0``.

    ``instances`` is a :class:`SimErrorInstance`, a list of them or a
    :class:`ColumnSet`; several instances share one ``H`` and the summed
    bound is minimized. Returns a :class:`MultiplierGroup` (``h`` unset).
    """
    config = config or MStepConfig()
    cols = _as_columns(instances)
    n_x = eta_k.E.shape[0]
    g = to_explicit(eta_k)
    try:
        H0, P0 = lyapunov_certificate(g.A, g.C, g.Sigma_v)
    except NotCertifiablyStableError:
        raise NotCertifiablyStableError("model not certifiably stable: no multiplier exists") from None
    # A start certificate for E = I; map it to the given E through H0 -> E^-T H0.
    Einv = np.linalg.inv(eta_k.E)
    H0 = Einv.T @ H0
    if config.method == "sdp":
        return _fit_sdp(eta_k, cols, config)
    lay, build = _fit_builder(eta_k, cols, n_x)
    prob = linearize(build, lay.size)
    z0 = lay.pack({"Phi": H0, "P": P0})
    gap = config.fit_gap_tol * max(1.0, abs(prob.objective(z0)))
    res = solve_barrier(prob, z0, gap_tol=gap, mu=config.barrier_mu,
                        max_newton=config.max_newton, stage_newton=config.stage_newton,
                        ftol=config.ftol)
    v = lay.unpack(_pull_inside(prob, res.z, z0))
    return MultiplierGroup(cols, v["Phi"], v["P"], None, res.value, res.status)


def _pull_inside(prob, z, z0, margin=1e-8):
    """Move ``z`` toward the strictly feasible ``z0`` until every constraint holds with ``margin``.

    The fit may end within rounding of the boundary of the stability set; a
    later solve that starts from it then sees an infeasible point. Every
    constraint is affine, so points on the segment to ``z0`` stay feasible.
    """
    for a in (0.0, 1e-6, 1e-4, 1e-3, 1e-2, 0.1, 0.5):
        zz = z + a * (z0 - z)
        if prob.strictly_feasible(zz, margin):
            return zz
    return z0


def _fit_sdp(eta_k, cols, config):
    n_x = eta_k.E.shape[0]
    k = cols.k
    lay = Layout([("Phi", (n_x, n_x), False), ("P", (n_x, n_x), True), ("s", (k, 1), False)])
    mu = config.strict_margin

    def build(z):
        v = lay.unpack(z)
        mult = Multiplier(v["Phi"])
        mats = [epigraph_matrix(eta_k, mult, cols.instance(j), v["s"][j, 0]) for j in range(k)]
        M = stability_lmi(eta_k, v["Phi"], v["P"])
        mats.append(M - mu * max(1.0, _norm_hint(eta_k)) * np.eye(M.shape[0]))
        return mats

    c = np.zeros(lay.size)
    c[lay.slice_of("s")] = 1.0
    res = sdp.solve(conic_from_affine(build, lay.size, c), tol=config.sdp_tol)
    if res.status == "infeasible":
        raise NotCertifiablyStableError("model not certifiably stable: multiplier SDP infeasible")
    if not res.ok:
        raise MStepError(f"multiplier SDP failed with status {res.status}", status=res.status)
    v = lay.unpack(res.x)
    return MultiplierGroup(cols, v["Phi"], v["P"], None, float(v["s"].sum()), res.status)


def _norm_hint(eta):
    return float(max(np.abs(eta.Sigma_v).max(), 1e-300))


def _as_columns(instances):
    if isinstance(instances, ColumnSet):
        return instances
    if isinstance(instances, SimErrorInstance):
        return ColumnSet.from_instances([instances])
    return ColumnSet.from_instances(list(instances))


def prepare_multipliers(eta_k, columns, config: MStepConfig | None = None):
    """Stage (i) multiplier fits followed by stage (ii) tightness offsets.

    With ``share_multiplier`` one group holds every column; otherwise each
    column gets its own fit. Results do not depend on evaluation order.
    """
    config = config or MStepConfig()
    cols = _as_columns(columns)
    if config.share_multiplier:
        parts = [cols]
    else:
        parts = [cols.select(j) for j in range(cols.k)]
    groups = []
    for part in parts:
        grp = fit_multiplier_H(eta_k, part, config)
        grp.h = compute_h_columns(eta_k, grp.H, part)
        groups.append(grp)
    return groups


# ------------------------------------------------------------------ M-step

@dataclass
class MStepResult:
    eta: ImplicitModel
    qhat_new: float
    qhat_k: float
    status: str
    newton_steps: int = 0
    wall_s: float = 0.0
    certificates: list = field(default_factory=list)


def _mstep_layout(eta_k, groups, config):
    n_x = eta_k.E.shape[0]
    n_u, n_y, n_w = eta_k.K.shape[1], eta_k.C.shape[0], eta_k.L.shape[1]
    entries = _eta_entries(n_x, n_u, n_y, n_w, config.estimate_D)
    entries += [(f"P{g}", (n_x, n_x), True) for g in range(len(groups))]
    return Layout(entries)


def _scale_cap_lmi(eta, rho):
    Xi = np.hstack([eta.E, eta.F, eta.K, eta.L])
    n, m = Xi.shape
    return np.block([[rho * np.eye(n), Xi], [Xi.T, rho * np.eye(m)]])


def _cap_value(eta_k, config):
    Xi = np.hstack([eta_k.E, eta_k.F, eta_k.K, eta_k.L])
    return config.scale_cap * max(np.linalg.norm(Xi, 2), 1e-12)


def _mstep_builder(eta_k, groups, Sigma_v_k, T, config):
    lay = _mstep_layout(eta_k, groups, config)
    rho = _cap_value(eta_k, config)
    n_y = eta_k.C.shape[0]
    Svk_inv = np.linalg.inv(Sigma_v_k)
    _, logdet_k = np.linalg.slogdet(Sigma_v_k)
    const = T * logdet_k - T * n_y
    floor = config.sigma_v_floor * np.eye(n_y)

    def build(z):
        v = lay.unpack(z)
        eta = _EtaView(v, eta_k.D)
        blocks, lmis = [], []
        lin = const + T * float(np.sum(Svk_inv * eta.Sigma_v))
        for gi, grp in enumerate(groups):
            D, S = _psi_blocks(grp.H, eta.E, eta.F, eta.C, eta.Sigma_v)
            B, lg = _btilde(grp.H, eta.E, eta.F, eta.K, eta.L, eta.D, grp.columns, grp.h)
            blocks.append((D, S, B))
            lin += lg
            lmis.append(stability_lmi(eta, grp.H, v[f"P{gi}"]))
        lmis.append(eta.Sigma_v - floor)
        lmis.append(_scale_cap_lmi(eta, rho))
        return blocks, lmis, lin

    return lay, build


def _eta_values(eta, groups, estimate_D):
    vals = {"E": eta.E, "F": eta.F, "K": eta.K, "L": eta.L, "C": eta.C, "Sigma_v": eta.Sigma_v}
    if estimate_D:
        vals["D"] = eta.D
    for gi, grp in enumerate(groups):
        vals[f"P{gi}"] = grp.P
    return vals


def qhat(eta, groups, Sigma_v_k, T, config: MStepConfig | None = None):
    """Convex upper bound on ``-2 Q3 - T n_y log(2 pi)`` at ``eta``; ``inf`` if a relaxation is unbounded."""
    config = config or MStepConfig()
    n_y = eta.C.shape[0]
    total = T * np.linalg.slogdet(Sigma_v_k)[1] - T * n_y + T * float(np.sum(np.linalg.inv(Sigma_v_k) * eta.Sigma_v))
    for grp in groups:
        D, S = _psi_blocks(grp.H, eta.E, eta.F, eta.C, eta.Sigma_v)
        B, lg = _btilde(grp.H, eta.E, eta.F, eta.K, eta.L, eta.D, grp.columns, grp.h)
        try:
            fac = BlockTriCholesky(np.broadcast_to(D, (T,) + D.shape), np.broadcast_to(S, (T - 1,) + S.shape))
        except np.linalg.LinAlgError:
            return np.inf
        Y = fac.solve_lower(B)
        total += float(np.einsum("tak,tak->", Y, Y)) + lg
    return total


def _finish(eta_k, eta_new, groups, Sigma_v_k, T, config, status, steps, t0):
    q_k = qhat(eta_k, groups, Sigma_v_k, T, config)
    q_new = qhat(eta_new, groups, Sigma_v_k, T, config) if eta_new is not None else np.inf
    keep = eta_new is None or not np.isfinite(q_new) or q_new > q_k
    if not keep:
        try:
            keep = spectral_radius(to_explicit(eta_new).A) >= 1.0
        except CertificateError:
            keep = True
    if keep:
        return MStepResult(eta_k, q_k, q_k, "kept" if status in ("optimal", "near-optimal") else status,
                           steps, time.perf_counter() - t0, [g.P for g in groups])
    return MStepResult(eta_new, q_new, q_k, status, steps, time.perf_counter() - t0,
                       [g.P for g in groups])


def solve_mstep_sdp(eta_k, groups, Sigma_v_k, T, config: MStepConfig | None = None):
    """Minimize the bound over the intersection of the stability sets of all multiplier groups.

    ``eta_k`` must lie in every stability set with the certificates stored
    in ``groups``. The returned model never has a larger bound than
    ``eta_k``; if the solver would return a worse point, ``eta_k`` is kept
    and the status reads ``kept``.
    """
    config = config or MStepConfig()
    t0 = time.perf_counter()
    if config.method == "sdp":
        return _mstep_conic(eta_k, groups, Sigma_v_k, T, config, t0)
    lay, build = _mstep_builder(eta_k, groups, Sigma_v_k, T, config)
    z0 = lay.pack(_eta_values(eta_k, groups, config.estimate_D))
    prob = linearize(build, lay.size, z0)
    if not prob.feasible(z0):
        raise MStepError("current iterate is not strictly inside the stability sets", eta_k)
    try:
        gap = config.gap_tol * max(1.0, abs(prob.objective(z0)))
        res = solve_barrier(prob, z0, gap_tol=gap, mu=config.barrier_mu,
                            max_newton=config.max_newton, stage_newton=config.stage_newton,
                            ftol=config.ftol)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise MStepError(f"barrier solve failed: {exc}", eta_k) from exc
    v = lay.unpack(res.z)
    eta_new = _to_model(v, eta_k, 0)
    return _finish(eta_k, eta_new, groups, Sigma_v_k, T, config, res.status, res.newton_steps, t0)


def _to_model(v, eta_k, g):
    return ImplicitModel(v["E"], v["F"], v["K"], v["L"], v["C"], v.get("D", eta_k.D),
                         0.5 * (v["Sigma_v"] + v["Sigma_v"].T), v[f"P{g}"])


def _mstep_conic(eta_k, groups, Sigma_v_k, T, config, t0):
    n_cols = sum(g.columns.k for g in groups)
    base = _mstep_layout(eta_k, groups, config)
    lay = Layout([(n, s, sym) for n, s, sym, _ in base.entries] + [("s", (n_cols, 1), False)])
    n_y = eta_k.C.shape[0]
    floor = config.sigma_v_floor * np.eye(n_y)
    mu = config.strict_margin
    rho = _cap_value(eta_k, config)

    def build(z):
        v = lay.unpack(z)
        eta = _EtaView(v, eta_k.D)
        mats = [_scale_cap_lmi(eta, rho)]
        j = 0
        for gi, grp in enumerate(groups):
            for c in range(grp.columns.k):
                mats.append(epigraph_matrix(eta, grp.multiplier(c), grp.columns.instance(c), v["s"][j, 0]))
                j += 1
            M = stability_lmi(eta, grp.H, v[f"P{gi}"])
            mats.append(M - mu * max(1.0, _norm_hint(eta_k)) * np.eye(M.shape[0]))
        mats.append(eta.Sigma_v - floor)
        return mats

    c = np.zeros(lay.size)
    c[lay.slice_of("s")] = 1.0
    sv = lay.slice_of("Sigma_v")
    iu = np.triu_indices(n_y)
    W = T * np.linalg.inv(Sigma_v_k)
    c[sv] = np.where(iu[0] == iu[1], 1.0, 2.0) * W[iu]
    res = sdp.solve(conic_from_affine(build, lay.size, c), tol=config.sdp_tol)
    if not res.ok:
        return _finish(eta_k, None, groups, Sigma_v_k, T, config, res.status, 0, t0)
    v = lay.unpack(res.x)
    return _finish(eta_k, _to_model(v, eta_k, 0), groups, Sigma_v_k, T, config, res.status, 0, t0)
