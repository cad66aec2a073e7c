"""Dense primal active-set solver for strictly convex inequality-constrained
quadratic programs:

    min 1/2 x^T H x + g^T x   s.t.   A x <= b

Problems in this codebase stay small (tens of variables, low hundreds of
constraints), so dense KKT solves per active-set change are fine. When no
feasible starting point is supplied, a Phase-I problem (minimize the largest
violation, solved with the same routine) either produces one or certifies
infeasibility.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

FEAS_TOL = 1e-8
STEP_TOL = 1e-11
MULT_TOL = 1e-9


@dataclass
class QpSolution:
    x: np.ndarray
    status: str  # "optimal" | "infeasible" | "max_iter"
    iterations: int
    active: list


def _active_set_solve(h_mat, g_vec, a_ineq, b_ineq, x0, max_iter):
    """Primal active-set iteration from a feasible x0."""
    n = h_mat.shape[0]
    n_con = a_ineq.shape[0]
    x = x0.copy()
    work: list[int] = []

    for it in range(1, max_iter + 1):
        nw = len(work)
        kkt = np.zeros((n + nw, n + nw))
        kkt[:n, :n] = h_mat
        rhs = np.zeros(n + nw)
        rhs[:n] = -(h_mat @ x + g_vec)
        if nw:
            a_w = a_ineq[work]
            kkt[:n, n:] = a_w.T
            kkt[n:, :n] = a_w
        try:
            sol = np.linalg.solve(kkt, rhs)
        except np.linalg.LinAlgError:
            sol, *_ = np.linalg.lstsq(kkt, rhs, rcond=None)
        d = sol[:n]
        lam = sol[n:]

        if np.max(np.abs(d), initial=0.0) <= STEP_TOL:
            if nw == 0 or np.min(lam) >= -MULT_TOL:
                return QpSolution(x, "optimal", it, list(work))
            work.pop(int(np.argmin(lam)))
            continue

        # Longest step along d before an inactive constraint blocks.
        alpha = 1.0
        blocker = -1
        ad = a_ineq @ d
        resid = b_ineq - a_ineq @ x
        for i in range(n_con):
            if i in work or ad[i] <= STEP_TOL:
                continue
            ai = max(resid[i], 0.0) / ad[i]
            if ai < alpha - 1e-14:
                alpha = ai
                blocker = i
        x = x + alpha * d
        if blocker >= 0:
            work.append(blocker)

    return QpSolution(x, "max_iter", max_iter, list(work))


def solve_qp(h_mat, g_vec, a_ineq=None, b_ineq=None, x0=None,
             max_iter: int | None = None) -> QpSolution:
    """Solve the QP; H must be positive definite.

    x0, when given, must satisfy the constraints (within FEAS_TOL). Otherwise
    the unconstrained minimizer is tried and, failing that, a Phase-I search
    runs first; status "infeasible" means Phase-I could not reach the
    feasible set.
    """
    h_mat = np.asarray(h_mat, dtype=float)
    g_vec = np.asarray(g_vec, dtype=float)
    n = h_mat.shape[0]
    if a_ineq is None or len(a_ineq) == 0:
        return QpSolution(np.linalg.solve(h_mat, -g_vec), "optimal", 0, [])
    a_ineq = np.asarray(a_ineq, dtype=float).reshape(-1, n)
    b_ineq = np.asarray(b_ineq, dtype=float).reshape(-1)
    max_iter = max_iter or 20 * (n + a_ineq.shape[0])

    if x0 is not None and np.max(a_ineq @ x0 - b_ineq) <= FEAS_TOL:
        start = np.asarray(x0, dtype=float)
    else:
        x_uc = np.linalg.solve(h_mat, -g_vec)
        if np.max(a_ineq @ x_uc - b_ineq) <= FEAS_TOL:
            return QpSolution(x_uc, "optimal", 0, [])
        start = _phase_one(a_ineq, b_ineq, x_uc, max_iter)
        if start is None:
            return QpSolution(x_uc, "infeasible", 0, [])

    return _active_set_solve(h_mat, g_vec, a_ineq, b_ineq, start, max_iter)


def _phase_one(a_ineq, b_ineq, x_ref, max_iter):
    """Minimize the worst constraint violation; None when it stays positive."""
    n = a_ineq.shape[1]
    mu = 1e-6
    h1 = mu * np.eye(n + 1)
    g1 = np.zeros(n + 1)
    g1[-1] = 1.0
    a1 = np.hstack([a_ineq, -np.ones((a_ineq.shape[0], 1))])
    a1 = np.vstack([a1, np.zeros((1, n + 1))])
    a1[-1, -1] = -1.0  # t >= 0
    b1 = np.concatenate([b_ineq, [0.0]])

    t0 = max(float(np.max(a_ineq @ x_ref - b_ineq)), 0.0) * (1 + 1e-9) + 1e-9
    y0 = np.concatenate([x_ref, [t0]])
    sol = _active_set_solve(h1, g1, a1, b1, y0, max_iter)
    t_star = sol.x[-1]
    if t_star > 10 * FEAS_TOL:
        return None
    return sol.x[:n]
