"""Operator-splitting solver for convex QPs of the form

    min 1/2 x'Px + q'x   s.t.   l <= Ax <= u

This is the inner workhorse for every local trajectory subproblem. The
iteration is the standard splitting with an auxiliary constraint variable
(the same scheme popularized by OSQP): Ruiz equilibration of the problem
data, one sparse quasi-definite KKT factorization per solve, then cheap
triangular solves per iteration, with relaxation and scaled termination
checks on the unscaled residuals. Everything is plain numpy/scipy and fully
deterministic.
"""

from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

# Bounds with magnitude >= INF are treated as absent.
INF = 1e30

_SIGMA = 1e-6        # primal regularization
_ALPHA = 1.6         # over-relaxation
_RHO = 0.1           # step size for inequality rows
_RHO_EQ_SCALE = 1e3  # stiffer step on equality rows (l == u)
_RUIZ_ITERS = 3
_STALL_WINDOW = 1000   # iterations without primal progress => infeasible
_STALL_FACTOR = 0.999


class QpStatus(Enum):
    SOLVED = "solved"
    MAX_ITERATIONS = "max_iterations"
    INFEASIBLE = "infeasible"


@dataclass
class QuadraticProgram:
    """Problem data. A may be None for an unconstrained problem."""

    P: sp.spmatrix | np.ndarray
    q: np.ndarray
    A: sp.spmatrix | np.ndarray | None = None
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None

    @property
    def n(self):
        return self.q.shape[0]

    @property
    def m(self):
        return 0 if self.A is None else self.A.shape[0]


@dataclass
class SolverSettings:
    max_iterations: int = 100_000
    feas_tol: float = 1e-6
    opt_tol: float = 1e-6
    # (x0, y0) primal/dual starting point
    warm_start: tuple[np.ndarray, np.ndarray] | None = None

    def validate(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.feas_tol <= 0 or self.opt_tol <= 0:
            raise ValueError("tolerances must be positive")


@dataclass
class QpSolution:
    x: np.ndarray
    status: QpStatus
    objective: float
    iterations: int
    y: np.ndarray = field(default=None, repr=False)  # row duals, for warm starts


def _min_eigenvalue(P):
    """Smallest eigenvalue of a symmetric matrix, cheap path for diagonals."""
    n = P.shape[0]
    if n == 0:
        return 0.0
    coo = P.tocoo()
    if np.all(coo.row == coo.col):
        d = P.diagonal()
        return float(d.min()) if n else 0.0
    if n <= 400:
        return float(np.linalg.eigvalsh(P.toarray()).min())
    try:
        val = spla.eigsh(P, k=1, which="SA", return_eigenvectors=False,
                         maxiter=5000, tol=1e-9)
        return float(val[0])
    except Exception:
        return float(np.linalg.eigvalsh(P.toarray()).min())


def _validate(qp, settings):
    settings.validate()
    P = sp.csc_matrix(qp.P)
    q = np.asarray(qp.q, dtype=float).ravel()
    n = q.shape[0]
    if P.shape != (n, n):
        raise ValueError(f"P shape {P.shape} does not match q length {n}")
    asym = abs(P - P.T)
    if asym.nnz and asym.max() > 1e-9:
        raise ValueError("P is not symmetric within 1e-9")
    if _min_eigenvalue(P) < -1e-6:
        raise ValueError("P is not positive semidefinite")
    if qp.A is None:
        A = sp.csc_matrix((0, n))
        lo = np.zeros(0)
        hi = np.zeros(0)
    else:
        A = sp.csc_matrix(qp.A)
        if A.shape[1] != n:
            raise ValueError(f"A has {A.shape[1]} columns, expected {n}")
        lo = np.asarray(qp.lower, dtype=float).ravel()
        hi = np.asarray(qp.upper, dtype=float).ravel()
        if lo.shape[0] != A.shape[0] or hi.shape[0] != A.shape[0]:
            raise ValueError("bound lengths do not match number of rows in A")
        lo = np.clip(lo, -INF, INF)
        hi = np.clip(hi, -INF, INF)
        if np.any(lo > hi):
            raise ValueError("lower > upper on some constraint row")
    return P, q, A, lo, hi


def _equilibrate(P, q, A, n, m):
    """Modified Ruiz scaling of [[P, A'], [A, 0]] plus cost normalization.

    Returns scaled (P, q, A) and the diagonal scalings (D over variables,
    E over rows) with the cost factor c.
    """
    D = np.ones(n)
    E = np.ones(m)
    Ps, As, qs = P, A, q
    for _ in range(_RUIZ_ITERS):
        cp = abs(Ps).max(axis=0).toarray().ravel() if Ps.nnz else np.zeros(n)
        ca = abs(As).max(axis=0).toarray().ravel() if m and As.nnz else np.zeros(n)
        col = np.maximum(cp, ca)
        col[col == 0] = 1.0
        d = 1.0 / np.sqrt(col)
        if m:
            row = abs(As).max(axis=1).toarray().ravel()
            row[row == 0] = 1.0
            e = 1.0 / np.sqrt(row)
        else:
            e = np.zeros(0)
        Dm = sp.diags(d)
        Ps = (Dm @ Ps @ Dm).tocsc()
        qs = d * qs
        if m:
            As = (sp.diags(e) @ As @ Dm).tocsc()
        D *= d
        E *= e if m else 1.0
    cnorm = max(abs(Ps).max() if Ps.nnz else 0.0,
                np.abs(qs).max() if n else 0.0)
    c = 1.0 / max(cnorm, 1e-8)
    Ps = (Ps * c).tocsc()
    qs = qs * c
    return Ps, qs, As, D, E, c


def solve_qp(qp: QuadraticProgram, settings: SolverSettings | None = None) -> QpSolution:
    """Solve the QP; returns a KKT point within tolerances on success.

    Infeasibility is declared heuristically, when the primal residual fails
    to shrink by the stall factor across a long window of iterations while
    still above tolerance.
    """
    if settings is None:
        settings = SolverSettings()
    P0, q0, A0, lo0, hi0 = _validate(qp, settings)
    n, m = q0.shape[0], A0.shape[0]

    P, q, A, D, E, c = _equilibrate(P0, q0, A0, n, m)
    lo = E * lo0 if m else lo0
    hi = E * hi0 if m else hi0
    if m:
        lo[lo0 <= -INF] = -INF
        hi[hi0 >= INF] = INF

    eps_p = settings.feas_tol
    eps_d = settings.opt_tol

    rho_vec = np.full(m, _RHO)
    if m:
        rho_vec[hi - lo < 1e-12] = _RHO * _RHO_EQ_SCALE

    if settings.warm_start is not None:
        x0, y0 = settings.warm_start
        x0 = np.asarray(x0, dtype=float).ravel()
        y0 = np.asarray(y0, dtype=float).ravel()
        if x0.shape[0] != n or y0.shape[0] != m:
            raise ValueError("warm start dimensions do not match problem")
        x = x0 / D
        y = c * (y0 / E) if m else np.zeros(0)
        z = np.clip(A @ x, lo, hi) if m else np.zeros(0)
    else:
        x = np.zeros(n)
        y = np.zeros(m)
        z = np.clip(np.zeros(m), lo, hi)

    def residuals(x, y, z):
        """Unscaled residuals and their relative tolerances."""
        Ax = (A @ x) / E if m else np.zeros(0)
        zu = z / E if m else np.zeros(0)
        Px = (P @ x) / (c * D)
        Aty = (A.T @ y) / (c * D) if m else np.zeros(n)
        qu = q / (c * D)
        r_prim = np.abs(Ax - zu).max() if m else 0.0
        r_dual = np.abs(Px + qu + Aty).max() if n else 0.0
        s_prim = eps_p + eps_p * max(
            np.abs(Ax).max() if m else 0.0, np.abs(zu).max() if m else 0.0)
        s_dual = eps_d + eps_d * max(
            np.abs(Px).max(), np.abs(qu).max() if n else 0.0,
            np.abs(Aty).max() if m else 0.0)
        return r_prim, r_dual, s_prim, s_dual

    def solution(x, y, status, iters):
        xs = D * x
        ys = (y * E) / c if m else np.zeros(0)
        obj = float(0.5 * xs @ (P0 @ xs) + q0 @ xs)
        return QpSolution(xs, status, obj, iters, ys)

    r_prim, r_dual, s_prim, s_dual = residuals(x, y, z)
    if r_prim <= s_prim and r_dual <= s_dual:
        return solution(x, y, QpStatus.SOLVED, 0)

    kkt = sp.bmat(
        [[P + _SIGMA * sp.eye(n), A.T if m else None],
         [A if m else None, -sp.diags(1.0 / rho_vec) if m else None]],
        format="csc") if m else sp.csc_matrix(P + _SIGMA * sp.eye(n))
    lu = spla.splu(kkt)

    check_every = 1 if n <= 100 else 5
    prim_log = [(0, r_prim)]   # (iteration, primal residual) checkpoints
    iters = 0
    while iters < settings.max_iterations:
        iters += 1
        if m:
            rhs = np.concatenate([_SIGMA * x - q, z - y / rho_vec])
            sol = lu.solve(rhs)
            x_t, nu = sol[:n], sol[n:]
            z_t = z + (nu - y) / rho_vec
            x = _ALPHA * x_t + (1 - _ALPHA) * x
            z_rel = _ALPHA * z_t + (1 - _ALPHA) * z
            z_new = np.clip(z_rel + y / rho_vec, lo, hi)
            y = y + rho_vec * (z_rel - z_new)
            z = z_new
        else:
            x = lu.solve(_SIGMA * x - q)

        if iters % check_every == 0 or iters == settings.max_iterations:
            r_prim, r_dual, s_prim, s_dual = residuals(x, y, z)
            if r_prim <= s_prim and r_dual <= s_dual:
                return solution(x, y, QpStatus.SOLVED, iters)
            if r_prim > s_prim:
                # stagnation: compare against the residual a full window ago
                prim_log.append((iters, r_prim))
                while len(prim_log) > 1 and prim_log[1][0] <= iters - _STALL_WINDOW:
                    prim_log.pop(0)
                it_old, r_old = prim_log[0]
                if (iters - it_old >= _STALL_WINDOW
                        and r_prim > _STALL_FACTOR * r_old):
                    return solution(x, y, QpStatus.INFEASIBLE, iters)
            else:
                prim_log = [(iters, r_prim)]

    return solution(x, y, QpStatus.MAX_ITERATIONS, iters)
