"""Interior-point (log-barrier Newton) solver for block-tridiagonal matrix-fractional objectives.

Minimizes::

    f(z) = sum_g tr(B_g(z)' Psi_g(z)^-1 B_g(z)) + c0 + c'z
    s.t.   M_l(z) > 0  for every small LMI l

where every ``Psi_g`` is a symmetric block-Toeplitz, block-tridiagonal matrix
and ``B_g``, ``Psi_g`` and ``M_l`` depend affinely on ``z``. The objective is
jointly convex on ``{Psi_g > 0}``. Each group is the Schur-complement form of
an epigraph LMI, so this solves the same convex program as the conic route
while exploiting the banded structure.

Derivative formulas (``X = Psi^-1 B``, ``Z_i = dB_i - dPsi_i X``)::

    df/dz_i       = 2 <dB_i, X> - <X, dPsi_i X> + c_i
    d2f/dz_i dz_j = 2 <Z_i, Psi^-1 Z_j>
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .blocktri import BlockTriCholesky

__all__ = ["AffineGroup", "AffineLMI", "MatrixFractionalProblem", "BarrierResult",
           "linearize", "solve_barrier"]

log = logging.getLogger(__name__)


@dataclass(eq=False)
class AffineGroup:
    D0: np.ndarray      # (n_b, n_b) diagonal block, constant part
    dD: np.ndarray      # (nv, n_b, n_b)
    S0: np.ndarray      # (n_b, n_b) sub-diagonal block
    dS: np.ndarray
    B0: np.ndarray      # (T, n_b, k)
    dB: np.ndarray      # (nv, T, n_b, k); stored for the active variables only

    def __post_init__(self):
        nv = self.dD.shape[0]
        touched = (np.abs(self.dD).reshape(nv, -1).max(axis=1, initial=0.0) > 0) \
            | (np.abs(self.dS).reshape(nv, -1).max(axis=1, initial=0.0) > 0) \
            | (np.abs(self.dB).reshape(nv, -1).max(axis=1, initial=0.0) > 0)
        self.active = np.nonzero(touched)[0]
        self.dB = np.ascontiguousarray(self.dB[self.active])
        T, n_b, k = self.B0.shape
        na = self.active.size
        # Layouts for batched products: rows ordered (block row, variable).
        self._dBt = np.ascontiguousarray(self.dB.transpose(1, 2, 0, 3))          # (T, n_b, na, k)
        # Row t of dPsi_i X is dD_i X[t] + dS_i X[t-1] + dS_i' X[t+1]; one stacked product per t.
        dD = self.dD[self.active].transpose(1, 0, 2).reshape(n_b * na, n_b)
        dS = self.dS[self.active].transpose(1, 0, 2).reshape(n_b * na, n_b)
        dSt = self.dS[self.active].transpose(2, 0, 1).reshape(n_b * na, n_b)
        self._dpsi_cat = np.ascontiguousarray(np.hstack([dD, dS, dSt]))
        psi_touched = (np.abs(self.dD).reshape(nv, -1).max(axis=1, initial=0.0) > 0) \
            | (np.abs(self.dS).reshape(nv, -1).max(axis=1, initial=0.0) > 0)
        self.psi_active = np.nonzero(psi_touched)[0]

    def at(self, z):
        D = self.D0 + np.tensordot(z, self.dD, axes=1)
        S = self.S0 + np.tensordot(z, self.dS, axes=1)
        B = self.B0 + np.tensordot(z[self.active], self.dB, axes=1)
        T = B.shape[0]
        D = np.broadcast_to(D, (T,) + D.shape)
        S = np.broadcast_to(S, (max(T - 1, 0),) + S.shape)
        return D, S, B

    def dpsi_times(self, X):
        """``dPsi_i X`` for every active variable, laid out as ``(T, n_b, na, k)``."""
        T, n_b, k = X.shape
        na = self.active.size
        X3 = np.zeros((T, 3 * n_b, k))
        X3[:, :n_b] = X
        X3[1:, n_b:2 * n_b] = X[:-1]
        X3[:-1, 2 * n_b:] = X[1:]
        return np.matmul(self._dpsi_cat, X3).reshape(T, n_b, na, k)


@dataclass(eq=False)
class AffineLMI:
    M0: np.ndarray
    dM: np.ndarray      # (nv, m, m)

    def at(self, z):
        return self.M0 + np.tensordot(z, self.dM, axes=1)


@dataclass(eq=False)
class MatrixFractionalProblem:
    nv: int
    groups: list
    lmis: list
    c0: float = 0.0
    c: np.ndarray | None = None

    def __post_init__(self):
        if self.c is None:
            self.c = np.zeros(self.nv)

    @property
    def barrier_degree(self):
        deg = sum(l.M0.shape[0] for l in self.lmis)
        return deg + sum(g.B0.shape[0] * g.B0.shape[1] + 1 for g in self.groups)

    def feasible(self, z):
        try:
            for l in self.lmis:
                np.linalg.cholesky(l.at(z))
            for g in self.groups:
                D, S, _ = g.at(z)
                BlockTriCholesky(D, S)
        except np.linalg.LinAlgError:
            return False
        return True

    def strictly_feasible(self, z, margin=1e-9):
        """Every small LMI has diagonally scaled minimum eigenvalue at least ``margin``; every ``Psi_g > 0``."""
        for l in self.lmis:
            M = l.at(z)
            d = np.sqrt(np.clip(np.abs(np.diag(M)), 1e-300, None))
            if np.linalg.eigvalsh(M / np.outer(d, d))[0] < margin:
                return False
        try:
            for g in self.groups:
                D, S, _ = g.at(z)
                BlockTriCholesky(D, S)
        except np.linalg.LinAlgError:
            return False
        return True

    def objective(self, z):
        """``f(z)``; ``inf`` outside the domain of the matrix-fractional terms."""
        total = self.c0 + float(self.c @ z)
        for g in self.groups:
            D, S, B = g.at(z)
            try:
                fac = BlockTriCholesky(D, S)
            except np.linalg.LinAlgError:
                return np.inf
            Y = fac.solve_lower(B)
            total += float(np.einsum("tak,tak->", Y, Y))
        return total

    def lmi_logdet(self, z):
        """Sum of log-determinants of every constraint, including the ``Psi_g`` blocks."""
        total = 0.0
        for g in self.groups:
            D, S, _ = g.at(z)
            try:
                total += BlockTriCholesky(D, S).logdet()
            except np.linalg.LinAlgError:
                return -np.inf
        for l in self.lmis:
            try:
                Lc = np.linalg.cholesky(l.at(z))
            except np.linalg.LinAlgError:
                return -np.inf
            total += 2.0 * np.log(np.diag(Lc)).sum()
        return total

    def derivatives(self, z):
        """Value, gradient and Hessian of ``f`` at ``z``."""
        nv = self.nv
        grad = self.c.copy()
        hess = np.zeros((nv, nv))
        value = self.c0 + float(self.c @ z)
        for g in self.groups:
            D, S, B = g.at(z)
            fac = BlockTriCholesky(D, S)
            X = fac.solve(B)
            value += float(np.vdot(B, X))
            act = g.active
            if act.size == 0:
                continue
            T, n_b, k = X.shape
            na = act.size
            Z = g.dpsi_times(X)
            np.subtract(g._dBt, Z, out=Z)                       # Z_i = dB_i - dPsi_i X, (T, n_b, na, k)
            # grad_i = 2 <dB_i, X> - <X, dPsi_i X> = <dB_i + Z_i, X>
            G = np.matmul((g._dBt + Z).reshape(T * n_b, na, k), X.reshape(T * n_b, k, 1))
            grad[act] += G.sum(axis=0)[:, 0]
            Y = fac.solve_lower(Z.reshape(T, n_b, na * k)).reshape(T * n_b, na, k)
            del Z
            hess[np.ix_(act, act)] += 2.0 * np.matmul(Y, Y.transpose(0, 2, 1)).sum(axis=0)
        return value, grad, 0.5 * (hess + hess.T)

    def lmi_derivatives(self, z):
        """Gradient and Hessian of ``-sum log det`` over all constraints."""
        nv = self.nv
        grad = np.zeros(nv)
        hess = np.zeros((nv, nv))
        for g in self.groups:
            gg, gh = _logdet_psi_derivatives(g, z)
            grad -= gg
            hess += gh
        for l in self.lmis:
            Lc = np.linalg.cholesky(l.at(z))
            Li = np.linalg.inv(Lc)
            Minv = Li.T @ Li
            G = np.einsum("ab,ibc->iac", Minv, l.dM)
            grad -= np.einsum("iaa->i", G)
            hess += np.einsum("iab,jba->ij", G, G)
        return grad, 0.5 * (hess + hess.T)


def _logdet_psi_derivatives(g, z):
    """Derivatives of ``log det Psi`` for block-Toeplitz tridiagonal ``Psi``.

    ``dPsi_i`` has block ``A_{i,d}`` on block diagonal ``d`` (``d = 0`` main,
    ``+1`` sub, ``-1`` super). With ``K = Psi^-1`` split into blocks::

        tr(K dPsi_i)            = sum_d sum_a tr(K[a, a+d] A_{i,d})   (a+d in range)
        tr(K dPsi_i K dPsi_j)   = sum_{d,e} sum_{a,c} tr(K[a, c+d] A_{i,d} K[c, a+e] A_{j,e})
    """
    D, S, _ = g.at(z)
    T, n, _ = D.shape
    K = np.linalg.inv(_dense_blocktri(D, S))
    K = 0.5 * (K + K.T)
    Kb = K.reshape(T, n, T, n).transpose(0, 2, 1, 3)        # Kb[a, c] = block (a, c)
    act = g.psi_active
    A = {0: g.dD[act], 1: g.dS[act], -1: np.swapaxes(g.dS[act], 1, 2)}
    grad = np.zeros(act.size)
    for d, Ad in A.items():
        idx = np.arange(T)
        ok = (idx + d >= 0) & (idx + d < T)
        blocks = Kb[idx[ok], idx[ok] + d]                   # K[a, a+d]
        grad += np.einsum("aij,nji->n", blocks, Ad)
    hess = np.zeros((grad.size, grad.size))
    for d, Ad in A.items():
        Kd = _shifted(Kb, d)                                # Kd[a, c] = K[a, c+d]
        for e, Ae in A.items():
            Ke = _shifted(np.swapaxes(Kb, 0, 1), e, transpose=True)   # Ke[a, c] = K[c, a+e]
            W = np.tensordot(Kd, Ke, axes=([0, 1], [0, 1]))          # (i, j, k, l)
            hess += np.einsum("ijkl,njk,mli->nm", W, Ad, Ae, optimize=True)
    nv = g.dD.shape[0]
    full_g = np.zeros(nv)
    full_h = np.zeros((nv, nv))
    full_g[act] = grad
    full_h[np.ix_(act, act)] = 0.5 * (hess + hess.T)
    return full_g, full_h


def _shifted(Kb, d, transpose=False):
    """Block array ``R[a, c] = Kb[a, c + d]`` (zero outside range); with ``transpose``, shifts the first index.

    For ``transpose=True`` the input is ``Kb^T`` in block indices (``X[c, a] = K[a, c]``
    was swapped by the caller) and the result is ``R[a, c] = K[c, a + d]``.
    """
    T = Kb.shape[0]
    R = np.zeros_like(Kb)
    if transpose:
        # X[a, c] = K[c, a]; want R[a, c] = K[c, a + d] = X[a + d, c]
        if d >= 0:
            R[:T - d] = Kb[d:]
        else:
            R[-d:] = Kb[:T + d]
    else:
        if d >= 0:
            R[:, :T - d] = Kb[:, d:]
        else:
            R[:, -d:] = Kb[:, :T + d]
    return R


def _dense_blocktri(D, S):
    from .blocktri import to_dense
    return to_dense(np.asarray(D), np.asarray(S))


def linearize(build, nv, z_ref=None):
    """Recover the affine structure of ``build(z)`` by evaluating it at ``z_ref`` and ``z_ref + e_i``.

    ``build`` returns ``(groups, lmis, lin)`` where ``groups`` is a list of
    ``(D, S, B)`` triples, ``lmis`` a list of symmetric matrices and ``lin``
    a scalar; all must be affine in ``z``.
    """
    z_ref = np.zeros(nv) if z_ref is None else np.asarray(z_ref, dtype=float)
    g0, l0, c_ref = build(z_ref)
    dg = [([], [], []) for _ in g0]
    dl = [[] for _ in l0]
    c = np.zeros(nv)
    for i in range(nv):
        z = z_ref.copy()
        z[i] += 1.0
        gi, li, ci = build(z)
        for (D, S, B), (D0, S0, B0), acc in zip(gi, g0, dg):
            acc[0].append(D - D0)
            acc[1].append(S - S0)
            acc[2].append(B - B0)
        for M, M0, acc in zip(li, l0, dl):
            acc.append(M - M0)
        c[i] = ci - c_ref
    groups = []
    for (D0, S0, B0), (dD, dS, dB) in zip(g0, dg):
        dD, dS, dB = np.array(dD), np.array(dS), np.array(dB)
        groups.append(AffineGroup(
            D0 - np.tensordot(z_ref, dD, axes=1), dD,
            S0 - np.tensordot(z_ref, dS, axes=1), dS,
            B0 - np.tensordot(z_ref, dB, axes=1), dB,
        ))
    lmis = [AffineLMI(M0 - np.tensordot(z_ref, np.array(dM), axes=1), np.array(dM))
            for M0, dM in zip(l0, dl)]
    return MatrixFractionalProblem(nv, groups, lmis, c0=c_ref - float(c @ z_ref), c=c)


@dataclass
class BarrierResult:
    z: np.ndarray
    value: float
    status: str
    newton_steps: int
    gap: float
    history: list = field(default_factory=list)


def _newton_direction(H, g):
    d = np.sqrt(np.maximum(np.diag(H), 1e-300))
    Hs = H / np.outer(d, d)
    gs = g / d
    jitter = 0.0
    for _ in range(12):
        try:
            L = np.linalg.cholesky(Hs + jitter * np.eye(len(g)))
            break
        except np.linalg.LinAlgError:
            jitter = 1e-12 if jitter == 0.0 else 10.0 * jitter
    else:
        raise np.linalg.LinAlgError("barrier Hessian is not positive definite")
    step = -np.linalg.solve(L.T, np.linalg.solve(L, gs))
    return step / d


def solve_barrier(problem: MatrixFractionalProblem, z0, *, gap_tol=1e-6, t0=None, mu=20.0,
                  newton_tol=1e-7, max_newton=400, stage_newton=20, ftol=1e-9,
                  alpha=0.25, beta=0.5):
    """Path-following barrier method from a strictly feasible ``z0``.

    Stops once the duality-gap bound ``m / t`` falls below ``gap_tol``
    (status ``optimal``). Two practical exits report ``near-optimal``: a
    whole centering stage improving the objective by less than
    ``ftol * max(1, |f|)``, and an exhausted Newton budget. Each stage takes
    at most ``stage_newton`` Newton steps, which bounds the time spent
    centering along directions where the objective is nearly flat.
    """
    z = np.asarray(z0, dtype=float).copy()
    if not problem.feasible(z):
        raise ValueError("barrier start point is not strictly feasible")
    m = max(problem.barrier_degree, 1)
    f0 = problem.objective(z)
    t = float(t0) if t0 is not None else m / max(1e-3 * abs(f0), 1e-2)
    steps = 0
    history = []

    def phi(zz, tt):
        ld = problem.lmi_logdet(zz)
        if not np.isfinite(ld):
            return np.inf
        fv = problem.objective(zz)
        return tt * fv - ld if np.isfinite(fv) else np.inf

    status = "optimal"
    f_prev = f0
    while True:
        for _ in range(stage_newton):
            if steps >= max_newton:
                status = "near-optimal"
                break
            fval, fg, fh = problem.derivatives(z)
            bg, bh = problem.lmi_derivatives(z)
            g = t * fg + bg
            H = t * fh + bh
            dz = _newton_direction(H, g)
            dec = -float(g @ dz)
            steps += 1
            if dec / 2.0 <= newton_tol:
                break
            cur = t * fval - problem.lmi_logdet(z)
            s = 1.0
            while s > 1e-12:
                zn = z + s * dz
                if phi(zn, t) <= cur - alpha * s * dec:
                    break
                s *= beta
            else:
                break
            z = zn
        f_cur = problem.objective(z)
        history.append((t, f_cur, steps))
        if status != "optimal" or m / t <= gap_tol:
            break
        if len(history) > 1 and f_prev - f_cur <= ftol * max(1.0, abs(f_cur)):
            status = "near-optimal"
            break
        f_prev = f_cur
        t *= mu
    value = problem.objective(z)
    log.debug("barrier finished: value=%.10g steps=%d gap=%.2e status=%s", value, steps, m / t, status)
    return BarrierResult(z, value, status, steps, m / t, history)
