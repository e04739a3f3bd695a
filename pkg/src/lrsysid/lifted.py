"""Lifted (stacked-over-time) forms of the dynamics.

Explicit form::

    vec(x) = Fbar @ vec([x_1, w_1..w_{T-1}]) + Gbar @ vec(u)
    vec(y) = Cbar @ vec(x) + Dbar @ vec(u) + vec(v)

Implicit form of the dynamics constraint::

    Fi @ vec(x) + eps = 0,   Fi = block-bidiagonal(E on diagonal, -F below)
    eps = -[E x1; K u_1 + L w_1; ...; K u_{T-1} + L w_{T-1}]
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["LiftedSystem", "lift_explicit", "lift_implicit", "implicit_offset", "build_lifted"]


@dataclass(frozen=True, eq=False)
class LiftedSystem:
    Fbar: np.ndarray | None = None
    Gbar: np.ndarray | None = None
    Cbar: np.ndarray | None = None
    Dbar: np.ndarray | None = None
    Sigma_Y: np.ndarray | None = None
    Fi: np.ndarray | None = None
    eps: np.ndarray | None = None


def lift_explicit(model, T):
    """Return ``(Fbar, Gbar, Cbar, Dbar, Sigma_Y)`` for horizon ``T``."""
    n_x, n_u, n_w = model.n_x, model.n_u, model.n_w
    A, B, G = model.A, model.B, model.G
    powers = [np.eye(n_x)]
    for _ in range(T - 1):
        powers.append(A @ powers[-1])
    Fbar = np.zeros((T * n_x, n_x + (T - 1) * n_w))
    Gbar = np.zeros((T * n_x, T * n_u))
    for t in range(T):
        rows = slice(t * n_x, (t + 1) * n_x)
        Fbar[rows, :n_x] = powers[t]
        for tau in range(t):
            Ak = powers[t - 1 - tau]
            Fbar[rows, n_x + tau * n_w: n_x + (tau + 1) * n_w] = Ak @ G
            Gbar[rows, tau * n_u:(tau + 1) * n_u] = Ak @ B
    I_T = np.eye(T)
    return Fbar, Gbar, np.kron(I_T, model.C), np.kron(I_T, model.D), np.kron(I_T, model.Sigma_v)


def lift_implicit(E, F, T):
    """Block lower-bidiagonal ``Fi`` with ``E`` on the diagonal and ``-F`` below it."""
    Fi = np.kron(np.eye(T), E)
    if T > 1:
        Fi -= np.kron(np.eye(T, k=-1), F)
    return Fi


def implicit_offset(E, K, L, u, x1, w):
    """The constant vector ``eps`` of the implicit dynamics constraint.

    Every block carries a minus sign so that ``Fi @ vec(x) + eps`` vanishes
    on trajectories of ``E x[t+1] = F x[t] + K u[t] + L w[t]``.
    """
    T = u.shape[0]
    blocks = np.empty((T, E.shape[0]))
    blocks[0] = -E @ x1
    if T > 1:
        blocks[1:] = -(u[:-1] @ K.T + w[:-1] @ L.T)
    return blocks.ravel()


def build_lifted(params, T, instance=None):
    """Lifted matrices for an explicit model, or for an implicit one plus an instance.

    ``params`` is either an :class:`~lrsysid.model.ExplicitModel` (explicit
    blocks are filled) or an :class:`~lrsysid.model.ImplicitModel` (the
    constraint blocks ``Fi`` and ``eps`` are filled; ``eps`` needs
    ``instance``).
    """
    I_T = np.eye(T)
    if hasattr(params, "A"):
        Fbar, Gbar, Cbar, Dbar, SY = lift_explicit(params, T)
        return LiftedSystem(Fbar=Fbar, Gbar=Gbar, Cbar=Cbar, Dbar=Dbar, Sigma_Y=SY)
    eps = None
    if instance is not None:
        eps = implicit_offset(params.E, params.K, params.L, instance.u, instance.x1, instance.w)
    return LiftedSystem(
        Cbar=np.kron(I_T, params.C),
        Dbar=np.kron(I_T, params.D),
        Sigma_Y=np.kron(I_T, params.Sigma_v),
        Fi=lift_implicit(params.E, params.F, T),
        eps=eps,
    )
