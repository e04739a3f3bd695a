"""Solver-neutral conic programs with affine PSD constraints.

A :class:`ConicProgram` minimizes ``c'x`` subject to ``F_k(x) = F_k0 + sum_i x_i F_ki >= 0``
(positive semidefinite) for every constraint ``k`` and optional equalities
``A x = b``. Coefficient blocks are stored sparse, as an ``(m*m, n)``
matrix mapping ``x`` to the row-major vectorization of ``F_k(x) - F_k0``.

Text format (``dump``/``load``), one record per line, base-0 indices::

    n <num_vars>
    c <var> <value>
    psd <k> <size>
    f <k> <var> <row> <col> <value>    # var = -1 is the constant block
    eq <row> <var> <value>
    b <row> <value>

Lines starting with ``#`` are comments. Only entries with ``row <= col``
of the symmetric blocks are written; ``load`` mirrors them.
"""

from __future__ import annotations

import io
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

__all__ = ["PSDConstraint", "ConicProgram", "SolveResult", "solve", "reference_feasibility",
           "dump", "load"]

STATUSES = ("optimal", "near-optimal", "infeasible", "failure")


@dataclass(eq=False)
class PSDConstraint:
    const: np.ndarray                       # (m, m) symmetric
    coeffs: sp.csr_matrix                   # (m*m, n)

    @property
    def size(self):
        return self.const.shape[0]

    def evaluate(self, x):
        m = self.size
        return self.const + (self.coeffs @ np.asarray(x, dtype=float)).reshape(m, m)


@dataclass(eq=False)
class ConicProgram:
    n: int
    c: np.ndarray
    constraints: list = field(default_factory=list)
    A_eq: sp.csr_matrix | None = None
    b_eq: np.ndarray | None = None

    def add_psd(self, const, blocks):
        """Append ``const + sum x_i B_i >= 0``; ``blocks`` maps variable index to a symmetric matrix."""
        const = np.asarray(const, dtype=float)
        m = const.shape[0]
        rows, cols, vals = [], [], []
        for i, B in blocks.items():
            B = sp.coo_matrix(B)
            rows.append(B.row * m + B.col)
            cols.append(np.full(B.nnz, i))
            vals.append(B.data)
        if rows:
            coeffs = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                                   shape=(m * m, self.n))
        else:
            coeffs = sp.csr_matrix((m * m, self.n))
        self.constraints.append(PSDConstraint(const, coeffs))
        return len(self.constraints) - 1

    def validate(self, tol=1e-12):
        c = np.asarray(self.c, dtype=float)
        if c.shape != (self.n,):
            raise ValueError("objective length does not match the variable count")
        for k, con in enumerate(self.constraints):
            m = con.size
            if con.const.shape != (m, m) or con.coeffs.shape != (m * m, self.n):
                raise ValueError(f"constraint {k} has inconsistent sizes")
            scale = max(1.0, np.abs(con.const).max(initial=0.0))
            if np.abs(con.const - con.const.T).max(initial=0.0) > tol * scale:
                raise ValueError(f"constraint {k} constant block is not symmetric")
            perm = (np.arange(m * m).reshape(m, m).T).ravel()
            if abs(con.coeffs - con.coeffs[perm]).max() > tol * max(1.0, abs(con.coeffs).max()):
                raise ValueError(f"constraint {k} coefficient blocks are not symmetric")
        if (self.A_eq is None) != (self.b_eq is None):
            raise ValueError("equalities need both A_eq and b_eq")
        if self.A_eq is not None and self.A_eq.shape != (len(self.b_eq), self.n):
            raise ValueError("equality block has inconsistent sizes")

    def max_violation(self, x):
        """Largest negative-eigenvalue magnitude, scaled by the block norm, over all constraints."""
        worst = 0.0
        for con in self.constraints:
            S = con.evaluate(x)
            S = 0.5 * (S + S.T)
            lam = np.linalg.eigvalsh(S)[0]
            worst = max(worst, -lam / max(1.0, np.abs(S).max()))
        if self.A_eq is not None:
            res = self.A_eq @ x - self.b_eq
            worst = max(worst, np.abs(res).max(initial=0.0) / max(1.0, np.abs(self.b_eq).max(initial=0.0)))
        return float(worst)


@dataclass(frozen=True)
class SolveResult:
    status: str
    x: np.ndarray | None
    objective: float
    violation: float
    wall_s: float

    @property
    def ok(self):
        return self.status in ("optimal", "near-optimal")


def solve(program: ConicProgram, *, tol=1e-8, solver="CLARABEL", verbose=False, max_violation=1e-6):
    """Solve with cvxpy; statuses are mapped onto the four-valued :class:`SolveResult` status."""
    import cvxpy as cp

    program.validate()
    t0 = time.perf_counter()
    x = cp.Variable(program.n)
    cons = []
    for con in program.constraints:
        m = con.size
        expr = cp.reshape(con.coeffs @ x + con.const.ravel(), (m, m), order="C")
        cons.append(0.5 * (expr + expr.T) >> 0)
    if program.A_eq is not None:
        cons.append(program.A_eq @ x == program.b_eq)
    prob = cp.Problem(cp.Minimize(np.asarray(program.c, dtype=float) @ x), cons)
    opts = {}
    if solver == "CLARABEL":
        opts = dict(tol_gap_abs=tol, tol_gap_rel=tol, tol_feas=tol)
    try:
        prob.solve(solver=solver, verbose=verbose, **opts)
    except cp.error.SolverError:
        return SolveResult("failure", None, np.nan, np.inf, time.perf_counter() - t0)
    wall = time.perf_counter() - t0
    if prob.status in (cp.INFEASIBLE, cp.INFEASIBLE_INACCURATE):
        return SolveResult("infeasible", None, np.inf, np.inf, wall)
    if x.value is None or prob.status not in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE):
        return SolveResult("failure", None, np.nan, np.inf, wall)
    xv = np.asarray(x.value, dtype=float)
    viol = program.max_violation(xv)
    status = "optimal" if prob.status == cp.OPTIMAL else "near-optimal"
    if viol > max_violation:
        status = "failure"
    return SolveResult(status, xv, float(program.c @ xv), viol, wall)


def reference_feasibility(program: ConicProgram, *, box=10.0, iters=3000, step=0.05, seed=0):
    """Dense sanity check for tiny programs (blocks up to 6x6).

    Projected ascent on ``min_k lambda_min(F_k(x))`` over the box
    ``|x_i| <= box``, using the eigenvector of the active constraint as a
    supergradient. Returns ``(best_margin, x)``; a positive margin proves
    strict feasibility, a clearly negative one suggests infeasibility
    within the box.
    """
    if any(con.size > 6 for con in program.constraints):
        raise ValueError("reference path is limited to blocks of size 6 or less")
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1.0, 1.0, program.n)
    best, best_x = -np.inf, x.copy()
    for k in range(iters):
        margins = []
        for con in program.constraints:
            lam, V = np.linalg.eigh(con.evaluate(x))
            margins.append((lam[0], V[:, 0], con))
        lam, v, con = min(margins, key=lambda t: t[0])
        if lam > best:
            best, best_x = lam, x.copy()
        g = con.coeffs.T @ np.outer(v, v).ravel()
        nrm = np.linalg.norm(g)
        if nrm == 0:
            break
        x = np.clip(x + step / np.sqrt(k + 1.0) * g / nrm, -box, box)
    return float(best), best_x


def dump(program: ConicProgram) -> str:
    out = io.StringIO()
    out.write("# conic program: minimize c'x s.t. F_k(x) psd, A x = b\n")
    out.write(f"n {program.n}\n")
    for i, v in enumerate(np.asarray(program.c, dtype=float)):
        if v != 0:
            out.write(f"c {i} {float(v)!r}\n")
    for k, con in enumerate(program.constraints):
        m = con.size
        out.write(f"psd {k} {m}\n")
        r, cc = np.nonzero(np.triu(con.const))
        for a, b in zip(r, cc):
            out.write(f"f {k} -1 {a} {b} {float(con.const[a, b])!r}\n")
        coo = con.coeffs.tocoo()
        order = np.lexsort((coo.row, coo.col))
        for idx in order:
            a, b = divmod(int(coo.row[idx]), m)
            if a <= b and coo.data[idx] != 0:
                out.write(f"f {k} {int(coo.col[idx])} {a} {b} {float(coo.data[idx])!r}\n")
    if program.A_eq is not None:
        coo = program.A_eq.tocoo()
        for a, b, v in zip(coo.row, coo.col, coo.data):
            out.write(f"eq {a} {b} {float(v)!r}\n")
        for a, v in enumerate(program.b_eq):
            out.write(f"b {a} {float(v)!r}\n")
    return out.getvalue()


def load(text: str) -> ConicProgram:
    n = None
    c = {}
    sizes, entries = {}, {}
    eq, b = [], {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        tok = line.split()
        kind = tok[0]
        if kind == "n":
            n = int(tok[1])
        elif kind == "c":
            c[int(tok[1])] = float(tok[2])
        elif kind == "psd":
            sizes[int(tok[1])] = int(tok[2])
            entries.setdefault(int(tok[1]), [])
        elif kind == "f":
            entries[int(tok[1])].append((int(tok[2]), int(tok[3]), int(tok[4]), float(tok[5])))
        elif kind == "eq":
            eq.append((int(tok[1]), int(tok[2]), float(tok[3])))
        elif kind == "b":
            b[int(tok[1])] = float(tok[2])
        else:
            raise ValueError(f"unknown record type {kind!r}")
    if n is None:
        raise ValueError("missing variable count record")
    cvec = np.zeros(n)
    for i, v in c.items():
        cvec[i] = v
    prog = ConicProgram(n, cvec)
    for k in sorted(sizes):
        m = sizes[k]
        const = np.zeros((m, m))
        blocks = {}
        for var, a, bb, v in entries[k]:
            M = const if var < 0 else blocks.setdefault(var, np.zeros((m, m)))
            M[a, bb] = v
            M[bb, a] = v
        prog.add_psd(const, blocks)
    if eq:
        rows = len(b)
        r, cc, v = zip(*eq)
        prog.A_eq = sp.csr_matrix((v, (r, cc)), shape=(rows, n))
        prog.b_eq = np.array([b[i] for i in range(rows)])
    return prog
