"""Linear Gaussian state-space model containers and simulation.

Models have the form::

    x[t+1] = A x[t] + B u[t] + G w[t],   w[t] ~ N(0, Sigma_w)
    y[t]   = C x[t] + D u[t] + v[t],     v[t] ~ N(0, Sigma_v)
    x[1]   ~ N(mu, Sigma_1)

Time series are stored as 2-D arrays with one row per time step, so
``series.ravel()`` stacks the samples ``[x_1; x_2; ...; x_T]``.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Dimensions",
    "ExplicitModel",
    "ImplicitModel",
    "GammaParams",
    "Trajectory",
    "CertificateError",
    "simulate",
    "sample_trajectory",
    "to_explicit",
    "spectral_radius",
    "make_random_stable_system",
    "mass_spring_damper",
    "psd_sqrt",
]

# Field order used for serialization; matches the parameter symbols.
_THETA_FIELDS = ("mu", "Sigma_1", "Sigma_w", "Sigma_v", "A", "B", "G", "C", "D")
_ETA_FIELDS = ("E", "F", "K", "L", "C", "D", "Sigma_v", "P")


class CertificateError(ValueError):
    """Raised when an implicit model cannot be mapped to explicit form."""


def _frozen(a, ndim=2):
    arr = np.array(a, dtype=float, copy=True)
    if arr.ndim == 0 and ndim == 2:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 0 and ndim == 1:
        arr = arr.reshape(1)
    if arr.ndim != ndim:
        raise ValueError(f"expected a {ndim}-d array, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


def _is_symmetric(M, tol=1e-10):
    return np.allclose(M, M.T, atol=tol * max(1.0, np.abs(M).max(initial=0.0)), rtol=0)


def _check_psd(name, M, strict=False):
    if M.shape[0] != M.shape[1]:
        raise ValueError(f"{name} must be square, got {M.shape}")
    if not _is_symmetric(M):
        raise ValueError(f"{name} must be symmetric")
    if M.size == 0:
        return
    lam = np.linalg.eigvalsh(M)
    scale = max(1.0, np.abs(lam).max())
    if strict and lam.min() <= 0:
        raise ValueError(f"{name} must be positive definite")
    if lam.min() < -1e-10 * scale:
        raise ValueError(f"{name} must be positive semidefinite (min eig {lam.min():.3g})")


def psd_sqrt(S):
    """Return ``L`` with ``L @ L.T == S`` for a symmetric PSD matrix (zeros allowed)."""
    S = np.asarray(S, dtype=float)
    lam, V = np.linalg.eigh((S + S.T) / 2)
    return V * np.sqrt(np.clip(lam, 0.0, None))


@dataclass(frozen=True)
class Dimensions:
    """Problem sizes. ``n_w < n_x`` is the singular case and is allowed."""

    n_x: int
    n_u: int
    n_y: int
    n_w: int
    T: int = 1

    def __post_init__(self):
        for name in ("n_x", "n_u", "n_y", "n_w", "T"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.n_w > self.n_x:
            raise ValueError("n_w > n_x is not supported")

    @property
    def n_z(self):
        """Length of vec([x_1, w_1, ..., w_{T-1}])."""
        return self.n_x + (self.T - 1) * self.n_w


@dataclass(frozen=True)
class GammaParams:
    """The parameters entering the output likelihood: Sigma_v, A, B, G, C, D."""

    Sigma_v: np.ndarray
    A: np.ndarray
    B: np.ndarray
    G: np.ndarray
    C: np.ndarray
    D: np.ndarray


@dataclass(frozen=True, eq=False)
class ExplicitModel:
    mu: np.ndarray
    Sigma_1: np.ndarray
    Sigma_w: np.ndarray
    Sigma_v: np.ndarray
    A: np.ndarray
    B: np.ndarray
    G: np.ndarray
    C: np.ndarray
    D: np.ndarray

    def __post_init__(self):
        for name in _THETA_FIELDS:
            object.__setattr__(self, name, _frozen(getattr(self, name), 1 if name == "mu" else 2))
        n_x = self.A.shape[0]
        n_u = self.B.shape[1]
        n_w = self.G.shape[1]
        n_y = self.C.shape[0]
        expected = {
            "mu": (n_x,),
            "Sigma_1": (n_x, n_x),
            "Sigma_w": (n_w, n_w),
            "Sigma_v": (n_y, n_y),
            "A": (n_x, n_x),
            "B": (n_x, n_u),
            "G": (n_x, n_w),
            "C": (n_y, n_x),
            "D": (n_y, n_u),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ValueError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        Dimensions(n_x, n_u, n_y, n_w)
        for name in ("Sigma_1", "Sigma_w", "Sigma_v"):
            _check_psd(name, getattr(self, name))

    @property
    def n_x(self):
        return self.A.shape[0]

    @property
    def n_u(self):
        return self.B.shape[1]

    @property
    def n_y(self):
        return self.C.shape[0]

    @property
    def n_w(self):
        return self.G.shape[1]

    def dims(self, T=1):
        return Dimensions(self.n_x, self.n_u, self.n_y, self.n_w, T)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def with_gamma(self, gamma: GammaParams):
        return self.replace(**dataclasses.asdict(gamma))

    @property
    def gamma(self):
        return GammaParams(self.Sigma_v, self.A, self.B, self.G, self.C, self.D)

    def to_dict(self):
        return {name: getattr(self, name).tolist() for name in _THETA_FIELDS}

    @classmethod
    def from_dict(cls, d):
        missing = [k for k in _THETA_FIELDS if k not in d]
        if missing:
            raise ValueError(f"model document is missing fields: {missing}")
        return cls(**{k: d[k] for k in _THETA_FIELDS})

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True, eq=False)
class ImplicitModel:
    """Implicit dynamics ``E x[t+1] = F x[t] + K u[t] + L w[t]`` plus certificate ``P``."""

    E: np.ndarray
    F: np.ndarray
    K: np.ndarray
    L: np.ndarray
    C: np.ndarray
    D: np.ndarray
    Sigma_v: np.ndarray
    P: np.ndarray

    def __post_init__(self):
        for name in _ETA_FIELDS:
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        n_x = self.E.shape[0]
        if self.E.shape != (n_x, n_x) or self.F.shape != (n_x, n_x) or self.P.shape != (n_x, n_x):
            raise ValueError("E, F and P must be n_x x n_x")
        if self.K.shape[0] != n_x or self.L.shape[0] != n_x or self.C.shape[1] != n_x:
            raise ValueError("inconsistent implicit model dimensions")
        if self.D.shape != (self.C.shape[0], self.K.shape[1]):
            raise ValueError("D must be n_y x n_u")
        _check_psd("P", self.P, strict=True)

    @property
    def n_x(self):
        return self.E.shape[0]

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    @classmethod
    def from_explicit(cls, model, P, E=None):
        """Represent an explicit model with ``E`` (identity by default)."""
        E = np.eye(model.n_x) if E is None else np.asarray(E, dtype=float)
        return cls(E, E @ model.A, E @ model.B, E @ model.G, model.C, model.D, model.Sigma_v, P)


@dataclass(frozen=True, eq=False)
class Trajectory:
    u: np.ndarray
    y: np.ndarray
    x: np.ndarray | None = None
    w: np.ndarray | None = None
    v: np.ndarray | None = None

    def __post_init__(self):
        T = np.asarray(self.u).shape[0]
        for name in ("u", "y", "x", "w", "v"):
            a = getattr(self, name)
            if a is None:
                continue
            a = _frozen(a)
            if a.shape[0] != T:
                raise ValueError(f"{name} has {a.shape[0]} samples, expected {T}")
            object.__setattr__(self, name, a)

    @property
    def T(self):
        return self.u.shape[0]


def _series(a, T, n, name):
    a = np.asarray(a, dtype=float)
    if a.ndim == 1 and n == 1:
        a = a[:, None]
    if a.shape != (T, n):
        raise ValueError(f"{name} has shape {a.shape}, expected {(T, n)}")
    return a


def simulate(model, u, x1, w):
    """Propagate ``x[t+1] = A x[t] + B u[t] + G w[t]`` from ``x1``; returns ``x`` of shape (T, n_x)."""
    u = np.asarray(u, dtype=float)
    if u.ndim == 1:
        u = u[:, None]
    T = u.shape[0]
    u = _series(u, T, model.n_u, "u")
    w = _series(w, T, model.n_w, "w")
    x1 = np.asarray(x1, dtype=float).reshape(-1)
    if x1.shape != (model.n_x,):
        raise ValueError(f"x1 has shape {x1.shape}, expected {(model.n_x,)}")
    drive = u @ model.B.T + w @ model.G.T
    x = np.empty((T, model.n_x))
    x[0] = x1
    for t in range(T - 1):
        x[t + 1] = model.A @ x[t] + drive[t]
    return x


def sample_trajectory(model, u, seed):
    """Draw ``x1``, ``w`` and ``v`` from the model and return the full trajectory.

    Draw order is fixed (x1, then w, then v) so a seed reproduces the same
    trajectory bit for bit. Zero covariances give Dirac draws.
    """
    u = np.asarray(u, dtype=float)
    if u.ndim == 1:
        u = u[:, None]
    T = u.shape[0]
    rng = np.random.default_rng(seed)
    x1 = model.mu + psd_sqrt(model.Sigma_1) @ rng.standard_normal(model.n_x)
    w = rng.standard_normal((T, model.n_w)) @ psd_sqrt(model.Sigma_w).T
    v = rng.standard_normal((T, model.n_y)) @ psd_sqrt(model.Sigma_v).T
    x = simulate(model, u, x1, w)
    y = x @ model.C.T + u @ model.D.T + v
    return Trajectory(u=u, y=y, x=x, w=w, v=v)


def to_explicit(eta, cond_limit=1e12):
    """Map an implicit model to ``GammaParams`` (A = E^-1 F etc.)."""
    E = eta.E
    if np.linalg.cond(E) >= cond_limit:
        raise CertificateError("E is numerically singular; the stability certificate is violated")
    A, B, G = (np.linalg.solve(E, M) for M in (eta.F, eta.K, eta.L))
    return GammaParams(eta.Sigma_v, A, B, G, eta.C, eta.D)


def spectral_radius(A):
    A = np.atleast_2d(np.asarray(A, dtype=float))
    if A.shape[0] != A.shape[1]:
        raise ValueError("spectral radius requires a square matrix")
    return float(np.abs(np.linalg.eigvals(A)).max())


def make_random_stable_system(dims, target_radius, seed, *, sigma_1=1.0, sigma_w=1.0,
                              sigma_v=1.0, direct=True, G=None):
    """Random model whose ``A`` has spectral radius exactly ``target_radius``.

    Covariances are ``sigma * I``. ``G`` defaults to a random matrix; pass
    ``np.eye(n_x)`` for full-rank identity noise input.
    """
    if not 0 < target_radius < 1:
        raise ValueError("target_radius must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    n_x, n_u, n_y, n_w = dims.n_x, dims.n_u, dims.n_y, dims.n_w
    A = rng.standard_normal((n_x, n_x))
    A *= target_radius / spectral_radius(A)
    B = rng.standard_normal((n_x, n_u))
    C = rng.standard_normal((n_y, n_x))
    D = rng.standard_normal((n_y, n_u)) if direct else np.zeros((n_y, n_u))
    if G is None:
        G = rng.standard_normal((n_x, n_w))
    return ExplicitModel(
        mu=np.zeros(n_x),
        Sigma_1=sigma_1 * np.eye(n_x),
        Sigma_w=sigma_w * np.eye(n_w),
        Sigma_v=sigma_v * np.eye(n_y),
        A=A, B=B, G=G, C=C, D=D,
    )


def mass_spring_damper(m, c, k, dt, *, sigma_w=1.0, sigma_v=1e-2, sigma_1=0.0,
                       C=((1.0, 0.0),), D=((0.0,),), mu=(0.0, 0.0)):
    """Euler-discretized ``m s'' + c s' + k s = u + w`` with state ``[s, s']``.

    The force disturbance enters through one channel, so ``n_w = 1 < n_x = 2``.
    """
    if m <= 0 or dt <= 0:
        raise ValueError("m and dt must be positive")
    A = np.array([[1.0, dt], [-k * dt / m, 1.0 - c * dt / m]])
    Bg = np.array([[0.0], [dt]])
    C = np.asarray(C, dtype=float)
    return ExplicitModel(
        mu=np.asarray(mu, dtype=float),
        Sigma_1=sigma_1 * np.eye(2),
        Sigma_w=np.array([[sigma_w]]),
        Sigma_v=sigma_v * np.eye(C.shape[0]),
        A=A, B=Bg, G=Bg.copy(), C=C, D=np.asarray(D, dtype=float),
    )
