"""Dense operator-splitting QP solver.

Solves   min 1/2 x'Px + q'x   s.t.  lo <= Ax <= hi

with an ADMM scheme (over-relaxation, per-row penalty, adaptive rho, dense
KKT factorization reused across iterations, active-set polish).  Rows with a
finite ``soft_weight`` w are not enforced exactly; their violation is charged
an l1 penalty w * dist(Ax, [lo, hi]) instead, which is how the slack-relaxed
recourse problems are solved without materializing slack variables.

Small dense problems only: the KKT system is factorized with LAPACK via
scipy and everything is float64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 20000


@dataclass
class QpProblem:
    """Canonical explicit form: min 1/2 y'Qy + c'y, Ey = e, Gy <= g."""

    quad: np.ndarray
    lin: np.ndarray
    eq_mat: np.ndarray
    eq_rhs: np.ndarray
    ineq_mat: np.ndarray
    ineq_rhs: np.ndarray

    def validate(self):
        n = self.quad.shape[0]
        if np.max(np.abs(self.quad - self.quad.T)) > 1e-12:
            raise ValueError("quadratic matrix must be symmetric")
        if np.linalg.eigvalsh(self.quad).min() < 1e-10:
            raise ValueError("quadratic matrix must be SPD (min eig >= 1e-10)")
        if self.eq_mat.size:
            if np.linalg.matrix_rank(self.eq_mat) < self.eq_mat.shape[0]:
                raise ValueError("equality rows must be linearly independent")
        for mat in (self.eq_mat, self.ineq_mat):
            if mat.size and mat.shape[1] != n:
                raise ValueError("constraint matrix width mismatch")
        return self


@dataclass
class SolveInfo:
    x: np.ndarray
    z: np.ndarray
    y: np.ndarray
    objective: float
    status: str              # "optimal" | "solver_limit"
    iterations: int
    r_prim: float
    r_dual: float


def _amax(v) -> float:
    return float(np.max(np.abs(v))) if v.size else 0.0


def _project_rows(v, lo, hi, soft_shift):
    """Prox of the row separable penalty: hard rows clip to [lo, hi]; soft
    rows shrink the violation by w/rho and clip no further than the bound."""
    clipped = np.clip(v, lo, hi)
    over = np.maximum(v - soft_shift, hi)
    under = np.minimum(v + soft_shift, lo)
    out = np.where(v > hi, np.minimum(over, v), clipped)
    out = np.where(v < lo, np.maximum(under, v), out)
    return out


class AdmmSolver:
    """Reusable solver for a fixed (P, A) pattern; bounds may change between
    solves (dev-bound right-hand sides move with the first-stage decision),
    which keeps the KKT factorization warm."""

    def __init__(self, P, q, A, lo, hi, soft_weight=None, sigma=1e-6,
                 rho0=0.1, alpha=1.6):
        self.P, self.q, self.A = P, q.copy(), A
        self.lo, self.hi = lo.copy(), hi.copy()
        self.n, self.m = P.shape[0], A.shape[0]
        self.sigma, self.alpha = sigma, alpha
        self.soft = (np.full(self.m, np.inf) if soft_weight is None
                     else np.asarray(soft_weight, dtype=np.float64))
        eq = np.isclose(lo, hi)
        self.rho_scale = np.where(eq, 1e3, 1.0)
        self._set_rho(rho0)
        self.x = np.zeros(self.n)
        self.z = np.zeros(self.m)
        self.y = np.zeros(self.m)

    def _set_rho(self, rho_bar):
        self.rho_bar = float(np.clip(rho_bar, 1e-6, 1e6))
        self.rho = self.rho_bar * self.rho_scale
        kkt = np.zeros((self.n + self.m, self.n + self.m))
        kkt[:self.n, :self.n] = self.P + self.sigma * np.eye(self.n)
        kkt[:self.n, self.n:] = self.A.T
        kkt[self.n:, :self.n] = self.A
        kkt[self.n:, self.n:] = -np.diag(1.0 / self.rho)
        self._lu = scipy.linalg.lu_factor(kkt)

    def set_bounds(self, lo, hi):
        self.lo, self.hi = np.asarray(lo, float).copy(), np.asarray(hi, float).copy()

    def set_lin(self, q):
        self.q = np.asarray(q, dtype=np.float64).copy()

    def warm_start(self, x=None, z=None, y=None):
        if x is not None:
            self.x = np.asarray(x, float).copy()
        if z is not None:
            self.z = np.asarray(z, float).copy()
        if y is not None:
            self.y = np.asarray(y, float).copy()

    def solve(self, tol_primal=DEFAULT_TOL, tol_dual=DEFAULT_TOL,
              max_iter=DEFAULT_MAX_ITER, polish=True) -> SolveInfo:
        P, q, A = self.P, self.q, self.A
        x, z, y = self.x, self.z, self.y
        rhs = np.empty(self.n + self.m)
        it_done = max_iter
        r_prim = r_dual = np.inf
        for it in range(1, max_iter + 1):
            rhs[:self.n] = self.sigma * x - q
            rhs[self.n:] = z - y / self.rho
            sol = scipy.linalg.lu_solve(self._lu, rhs)
            x_t = sol[:self.n]
            nu = sol[self.n:]
            z_t = z + (nu - y) / self.rho
            x = self.alpha * x_t + (1 - self.alpha) * x
            w = self.alpha * z_t + (1 - self.alpha) * z
            z = _project_rows(w + y / self.rho, self.lo, self.hi,
                              self.soft / self.rho)
            y = y + self.rho * (w - z)
            if it % 10 == 0 or it == max_iter:
                # infeasible problems drive the dual without bound; bail out
                # before overflow and report solver_limit via the residuals
                if _amax(y) > 1e14 or _amax(x) > 1e14:
                    it_done = it
                    break
                ax = A @ x
                r_prim = float(np.max(np.abs(ax - z))) if self.m else 0.0
                r_dual = float(np.max(np.abs(P @ x + q + A.T @ y)))
                s_prim = max(_amax(ax), _amax(z), 1.0)
                s_dual = max(_amax(P @ x), _amax(A.T @ y), _amax(q), 1.0)
                if r_prim <= tol_primal * s_prim and r_dual <= tol_dual * s_dual:
                    it_done = it
                    break
                if it % 100 == 0:
                    ratio = (r_prim / s_prim) / max(r_dual / s_dual, 1e-16)
                    scale = np.sqrt(ratio)
                    if scale > 5.0 or scale < 0.2:
                        self.x, self.z, self.y = x, z, y
                        self._set_rho(self.rho_bar * scale)
                        x, z, y = self.x, self.z, self.y
        self.x, self.z, self.y = x, z, y
        if polish:
            self._polish(tol_primal)
        x, z, y = self.x, self.z, self.y
        ax = A @ x
        r_prim = float(np.max(np.abs(ax - z))) if self.m else 0.0
        r_dual = float(np.max(np.abs(P @ x + q + A.T @ y)))
        s_prim = max(_amax(ax), _amax(z), 1.0)
        s_dual = max(_amax(P @ x), _amax(A.T @ y), _amax(q), 1.0)
        ok = r_prim <= tol_primal * s_prim and r_dual <= tol_dual * s_dual
        obj = float(0.5 * x @ P @ x + q @ x)
        return SolveInfo(x.copy(), z.copy(), y.copy(), obj,
                         "optimal" if ok else "solver_limit",
                         it_done, r_prim, r_dual)

    def penalty_mass(self) -> float:
        """Total violation of soft rows at the current iterate."""
        finite = np.isfinite(self.soft)
        if not np.any(finite):
            return 0.0
        ax = (self.A @ self.x)[finite]
        lo, hi = self.lo[finite], self.hi[finite]
        return float(np.sum(np.maximum(ax - hi, 0.0) +
                            np.maximum(lo - ax, 0.0)))

    def _polish(self, tol):
        """Guess the active set from the iterate, solve its KKT system
        exactly, and adopt the result when it is consistent (hard rows
        feasible, multiplier signs correct, dual residual not worse)."""
        if self.m == 0:
            return
        x, y = self.x, self.y
        ax = self.A @ x
        act_tol = 1e-6 * max(1.0, float(np.max(np.abs(ax))))
        eq = np.isclose(self.lo, self.hi)
        finite = np.isfinite(self.soft)
        viol_up = finite & (ax - self.hi > act_tol)
        viol_lo = finite & (self.lo - ax > act_tol)
        near_lo = np.abs(ax - self.lo) < act_tol
        near_hi = np.abs(ax - self.hi) < act_tol
        low = eq | (near_lo & ~viol_up & ~viol_lo)
        upp = near_hi & ~low & ~viol_up & ~viol_lo
        idx = np.nonzero(low | upp)[0]
        # soft rows beyond their bound carry the known multiplier +-w
        y_fixed = np.zeros(self.m)
        y_fixed[viol_up] = self.soft[viol_up]
        y_fixed[viol_lo] = -self.soft[viol_lo]
        if idx.size == 0 and not np.any(viol_up | viol_lo):
            return
        A_act = self.A[idx]
        b_act = np.where(low[idx], self.lo[idx], self.hi[idx])
        k = idx.size
        kkt = np.zeros((self.n + k, self.n + k))
        kkt[:self.n, :self.n] = self.P + 1e-12 * np.eye(self.n)
        if k:
            kkt[:self.n, self.n:] = A_act.T
            kkt[self.n:, :self.n] = A_act
            kkt[self.n:, self.n:] = -1e-12 * np.eye(k)
        rhs = np.concatenate([-(self.q + self.A.T @ y_fixed), b_act])
        try:
            sol = scipy.linalg.lu_solve(scipy.linalg.lu_factor(kkt), rhs)
        except (np.linalg.LinAlgError, ValueError):
            return
        x_new = sol[:self.n]
        y_new = y_fixed
        y_new[idx] = sol[self.n:]
        ax_new = self.A @ x_new
        hard = ~finite
        feas_tol = 1e-9 * max(1.0, float(np.max(np.abs(ax_new))))
        hard_ok = not np.any((ax_new[hard] > self.hi[hard] + feas_tol) |
                             (ax_new[hard] < self.lo[hard] - feas_tol))
        sign_tol = 1e-8 * max(1.0, float(np.max(np.abs(y_new))))
        signs_ok = (not np.any(y_new[idx][low[idx] & ~eq[idx]] > sign_tol)
                    and not np.any(y_new[idx][upp[idx]] < -sign_tol))
        r_dual_new = float(np.max(np.abs(self.P @ x_new + self.q +
                                         self.A.T @ y_new)))
        r_dual_old = float(np.max(np.abs(self.P @ x + self.q +
                                         self.A.T @ y)))
        if hard_ok and signs_ok and r_dual_new <= max(r_dual_old, 1e-10):
            self.x, self.y = x_new, y_new
            self.z = np.clip(ax_new, self.lo, self.hi)
            beyond = viol_up | viol_lo
            self.z[beyond] = ax_new[beyond]


def solve_qp(qp: QpProblem, tol_primal: float = DEFAULT_TOL,
             tol_dual: float = DEFAULT_TOL,
             max_iter: int = DEFAULT_MAX_ITER):
    """Solve the explicit-form problem.  Returns (primal, duals, objective,
    status); duals stack equality rows then inequality rows.  On an
    infeasible problem the residuals never meet tolerance and the status is
    ``solver_limit`` with residuals attached to the returned info."""
    me = qp.eq_mat.shape[0] if qp.eq_mat.size else 0
    mi = qp.ineq_mat.shape[0] if qp.ineq_mat.size else 0
    n = qp.quad.shape[0]
    mats = [m for m in (qp.eq_mat, qp.ineq_mat) if m.size]
    A = np.vstack(mats) if mats else np.zeros((0, n))
    lo = np.concatenate([qp.eq_rhs if me else np.zeros(0),
                         np.full(mi, -np.inf)])
    hi = np.concatenate([qp.eq_rhs if me else np.zeros(0),
                         qp.ineq_rhs if mi else np.zeros(0)])
    solver = AdmmSolver(qp.quad, qp.lin, A, lo, hi)
    info = solver.solve(tol_primal, tol_dual, max_iter)
    return info.x, info.y, info.objective, info.status
