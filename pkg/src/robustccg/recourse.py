"""HVAC benchmark instance and exact recourse evaluation.

The benchmark is a robust MPC problem on a small building-thermal model:
states are zone temperatures (n_x=4), inputs are HVAC signals (n_u=2), the
horizon is N=10 and a 5-dimensional uncertainty vector perturbs the dynamics
matrices linearly, A_t(xi) = A0_t + a_t . xi and B_t(xi) = B0_t + b_t . xi.

The first-stage decision u0 does not actuate the plant; it is the reference
that the recourse inputs u_1..u_{N-1} must stay within the deviation bounds
of.  The recourse problem is a convex QP in the stacked trajectory
(x_1..x_N, u_1..u_{N-1}); its exact value is what the outer loops verify
against.
"""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog

from .qp import AdmmSolver, QpProblem

W_SLACK = 1e3           # l1 weight on constraint violation in the relaxed QP
FEAS_EPS = 1e-7         # slack mass below this counts as feasible
SLACK_QUAD = 1e-6       # tiny curvature keeping the explicit slack QP SPD


@dataclass(frozen=True)
class HvacInstance:
    a0: np.ndarray        # (N, n_x, n_x) nominal dynamics per step
    b0: np.ndarray        # (N, n_x, n_u)
    a_sens: np.ndarray    # (N, n_x, n_x, n_xi) uncertainty sensitivity
    b_sens: np.ndarray    # (N, n_x, n_u, n_xi)
    p_cost: np.ndarray    # (n_x, n_x) stage state cost, SPD
    r_cost: np.ndarray    # (n_u, n_u) stage input cost, SPD
    pf_cost: np.ndarray   # (n_x, n_x) terminal cost, SPD
    x_lo: np.ndarray
    x_hi: np.ndarray
    u_lo: np.ndarray
    u_hi: np.ndarray
    du_lo: np.ndarray
    du_hi: np.ndarray
    x_init: np.ndarray
    seed: int

    @property
    def n_x(self) -> int:
        return self.a0.shape[1]

    @property
    def n_u(self) -> int:
        return self.b0.shape[2]

    @property
    def horizon(self) -> int:
        return self.a0.shape[0]

    @property
    def n_xi(self) -> int:
        return self.a_sens.shape[3]

    def a_of(self, t: int, xi: np.ndarray) -> np.ndarray:
        return self.a0[t] + self.a_sens[t] @ xi

    def b_of(self, t: int, xi: np.ndarray) -> np.ndarray:
        return self.b0[t] + self.b_sens[t] @ xi

    def validate(self):
        for m, name in ((self.p_cost, "P"), (self.r_cost, "R"),
                        (self.pf_cost, "P_f")):
            if np.linalg.eigvalsh(m).min() <= 0:
                raise ValueError(f"{name} must be SPD")
        if not (np.all(self.x_lo < self.x_hi) and np.all(self.u_lo < self.u_hi)):
            raise ValueError("bounds must be proper intervals")
        if not (np.all(self.du_lo < 0) and np.all(self.du_hi > 0)):
            raise ValueError("deviation bounds must straddle zero")
        for t in range(self.horizon):
            if np.max(np.abs(np.linalg.eigvals(self.a0[t]))) >= 1.0:
                raise ValueError("nominal dynamics must be stable")
        return self


@dataclass
class RecourseResult:
    q_obj: float
    q_fea: float
    y_opt: dict                 # {"x": (N, n_x), "u": (N-1, n_u)}
    multipliers: np.ndarray     # (N-1, n_u) signed duals of deviation rows
    status: str                 # optimal | infeasible_relaxed | solver_limit

    @property
    def score(self) -> float:
        """Relaxed objective used to rank adversarial scenarios."""
        return self.q_obj + W_SLACK * self.q_fea


def _spd(rng: np.random.Generator, n: int, lo: float, hi: float) -> np.ndarray:
    q, _ = np.linalg.qr(rng.normal(size=(n, n)))
    return q @ np.diag(rng.uniform(lo, hi, n)) @ q.T


def generate_instance(seed: int, dims: dict | None = None,
                      time_varying: bool = False,
                      max_tries: int = 100) -> HvacInstance:
    """Deterministic per seed.  ``dims`` may override n_x, n_u, horizon,
    n_xi.  Resamples internally until the invariants hold and the nominal
    problem (xi = 0, u0 = 0) is strictly feasible."""
    d = {"n_x": 4, "n_u": 2, "horizon": 10, "n_xi": 5}
    d.update(dims or {})
    n_x, n_u, horizon, n_xi = d["n_x"], d["n_u"], d["horizon"], d["n_xi"]
    rng = np.random.default_rng(seed)
    for _ in range(max_tries):
        a_nom = rng.normal(size=(n_x, n_x)) / np.sqrt(n_x)
        a_nom *= 0.9 / np.max(np.abs(np.linalg.eigvals(a_nom)))
        b_nom = rng.uniform(-1.0, 1.0, size=(n_x, n_u))
        b_nom /= max(np.linalg.norm(b_nom, 2), 1e-9)
        a0 = np.repeat(a_nom[None], horizon, axis=0)
        b0 = np.repeat(b_nom[None], horizon, axis=0)
        if time_varying:
            a0 = a0 + 0.02 * rng.normal(size=a0.shape)
            b0 = b0 + 0.02 * rng.normal(size=b0.shape)
        a_sens = rng.normal(size=(horizon, n_x, n_x, n_xi))
        a_sens *= 0.2 / max(np.linalg.norm(a_sens[t][:, :, k], 2)
                            for t in range(horizon) for k in range(n_xi))
        b_sens = rng.normal(size=(horizon, n_x, n_u, n_xi))
        b_sens *= 0.2 / max(np.linalg.norm(b_sens[t][:, :, k], 2)
                            for t in range(horizon) for k in range(n_xi))
        x_hi = rng.uniform(1.5, 2.5, n_x)
        u_hi = rng.uniform(0.8, 1.2, n_u)
        inst = HvacInstance(
            a0=a0, b0=b0, a_sens=a_sens, b_sens=b_sens,
            p_cost=_spd(rng, n_x, 0.5, 1.5),
            r_cost=_spd(rng, n_u, 0.1, 0.3),
            pf_cost=_spd(rng, n_x, 1.0, 2.0),
            x_lo=-x_hi, x_hi=x_hi, u_lo=-u_hi, u_hi=u_hi,
            du_lo=-u_hi, du_hi=u_hi,
            x_init=rng.uniform(0.25, 0.75, n_x) * x_hi,
            seed=seed)
        try:
            inst.validate()
        except ValueError:
            continue
        if _nominal_margin(inst) > 0.02:
            return inst
    raise RuntimeError(f"could not generate a valid instance from seed {seed}")


def _nominal_margin(inst: HvacInstance) -> float:
    """Smallest relative bound slack of the zero-input nominal trajectory."""
    x = inst.x_init
    margin = np.inf
    for t in range(inst.horizon):
        x = inst.a0[t] @ x
        margin = min(margin, float(np.min(
            (inst.x_hi - x) / (inst.x_hi - inst.x_lo))),
            float(np.min((x - inst.x_lo) / (inst.x_hi - inst.x_lo))))
    return margin


# ---------------------------------------------------------------------------
# stacked QP assembly (explicit canonical form)
# ---------------------------------------------------------------------------


def trajectory_dims(inst: HvacInstance) -> tuple:
    n_var = inst.horizon * inst.n_x + (inst.horizon - 1) * inst.n_u
    n_ineq = 2 * inst.horizon * inst.n_x + 4 * (inst.horizon - 1) * inst.n_u
    return n_var, n_ineq


def _dynamics_blocks(inst: HvacInstance, xi: np.ndarray) -> tuple:
    """Equality system E y = e over y = (x_1..x_N, u_1..u_{N-1})."""
    n_x, n_u, N = inst.n_x, inst.n_u, inst.horizon
    nv = N * n_x + (N - 1) * n_u
    E = np.zeros((N * n_x, nv))
    e = np.zeros(N * n_x)
    # x_1 = A_0(xi) x_init  (the first step carries no recourse input)
    E[:n_x, :n_x] = np.eye(n_x)
    e[:n_x] = inst.a_of(0, xi) @ inst.x_init
    for t in range(1, N):
        r = t * n_x
        E[r:r + n_x, r:r + n_x] = np.eye(n_x)
        E[r:r + n_x, r - n_x:r] = -inst.a_of(t, xi)
        cu = N * n_x + (t - 1) * n_u
        E[r:r + n_x, cu:cu + n_u] = -inst.b_of(t, xi)
    return E, e


def _cost_blocks(inst: HvacInstance) -> np.ndarray:
    n_x, n_u, N = inst.n_x, inst.n_u, inst.horizon
    nv = N * n_x + (N - 1) * n_u
    Q = np.zeros((nv, nv))
    for t in range(N - 1):
        r = t * n_x
        Q[r:r + n_x, r:r + n_x] = 2.0 * inst.p_cost
    r = (N - 1) * n_x
    Q[r:r + n_x, r:r + n_x] = 2.0 * inst.pf_cost
    for t in range(N - 1):
        c = N * n_x + t * n_u
        Q[c:c + n_u, c:c + n_u] = 2.0 * inst.r_cost
    return Q


def _ineq_blocks(inst: HvacInstance, u0: np.ndarray) -> tuple:
    """One-sided rows G y <= g: state boxes, input boxes, deviation bounds."""
    n_x, n_u, N = inst.n_x, inst.n_u, inst.horizon
    nv = N * n_x + (N - 1) * n_u
    rows, rhs = [], []
    for t in range(N):
        r = t * n_x
        for j in range(n_x):
            up = np.zeros(nv)
            up[r + j] = 1.0
            rows.append(up)
            rhs.append(inst.x_hi[j])
            dn = np.zeros(nv)
            dn[r + j] = -1.0
            rows.append(dn)
            rhs.append(-inst.x_lo[j])
    for t in range(N - 1):
        c = N * n_x + t * n_u
        for j in range(n_u):
            up = np.zeros(nv)
            up[c + j] = 1.0
            rows.append(up)
            rhs.append(inst.u_hi[j])
            dn = np.zeros(nv)
            dn[c + j] = -1.0
            rows.append(dn)
            rhs.append(-inst.u_lo[j])
            dup = np.zeros(nv)
            dup[c + j] = 1.0
            rows.append(dup)
            rhs.append(u0[j] + inst.du_hi[j])
            ddn = np.zeros(nv)
            ddn[c + j] = -1.0
            rows.append(ddn)
            rhs.append(-(u0[j] + inst.du_lo[j]))
    return np.stack(rows), np.array(rhs)


def assemble_qp(inst: HvacInstance, u0, xi, relaxed: bool) -> QpProblem:
    """Explicit stacked trajectory QP; with ``relaxed``, one nonnegative
    slack per inequality with linear weight W_SLACK (plus a tiny quadratic
    so the matrix stays SPD) makes the problem always feasible."""
    u0 = np.asarray(u0, dtype=np.float64).ravel()
    xi = np.asarray(xi, dtype=np.float64).ravel()
    E, e = _dynamics_blocks(inst, xi)
    Q = _cost_blocks(inst)
    G, g = _ineq_blocks(inst, u0)
    nv, mi = Q.shape[0], G.shape[0]
    if not relaxed:
        return QpProblem(Q + 1e-9 * np.eye(nv), np.zeros(nv), E, e, G, g)
    n_all = nv + mi
    Q_all = np.zeros((n_all, n_all))
    Q_all[:nv, :nv] = Q
    Q_all[nv:, nv:] = SLACK_QUAD * np.eye(mi)
    Q_all += 1e-9 * np.eye(n_all)
    lin = np.concatenate([np.zeros(nv), np.full(mi, W_SLACK)])
    E_all = np.hstack([E, np.zeros((E.shape[0], mi))])
    G_soft = np.hstack([G, -np.eye(mi)])
    G_pos = np.hstack([np.zeros((mi, nv)), -np.eye(mi)])
    return QpProblem(Q_all, lin, E_all, e,
                     np.vstack([G_soft, G_pos]),
                     np.concatenate([g, np.zeros(mi)]))


# ---------------------------------------------------------------------------
# fast compact evaluation (two-sided rows, soft-penalized bounds)
# ---------------------------------------------------------------------------


class RecourseSolver:
    """Exact Q(u0, xi) evaluation with per-xi KKT factorization reuse and
    warm starts.  Pure given (u0, xi); instances are immutable."""

    def __init__(self, inst: HvacInstance, cache_size: int = 32):
        self.inst = inst
        self._cost = _cost_blocks(inst)
        self._rows, self._lo0, self._hi0, self._row_kind = self._static_rows()
        self._cache: dict = {}
        self._cache_size = cache_size
        self.solves = 0

    def _static_rows(self) -> tuple:
        inst = self.inst
        n_x, n_u, N = inst.n_x, inst.n_u, inst.horizon
        nv = N * n_x + (N - 1) * n_u
        m = N * n_x + (N - 1) * n_u + (N - 1) * n_u  # state, input, deviation
        rows = np.zeros((m, nv))
        lo = np.zeros(m)
        hi = np.zeros(m)
        kind = []
        r = 0
        for t in range(N):
            for j in range(n_x):
                rows[r, t * n_x + j] = 1.0
                lo[r], hi[r] = inst.x_lo[j], inst.x_hi[j]
                kind.append(("state", t, j))
                r += 1
        for t in range(N - 1):
            for j in range(n_u):
                rows[r, N * n_x + t * n_u + j] = 1.0
                lo[r], hi[r] = inst.u_lo[j], inst.u_hi[j]
                kind.append(("input", t, j))
                r += 1
        for t in range(N - 1):
            for j in range(n_u):
                rows[r, N * n_x + t * n_u + j] = 1.0
                kind.append(("dev", t, j))
                r += 1
        return rows, lo, hi, kind

    def _solver_for(self, xi: np.ndarray, relaxed: bool) -> AdmmSolver:
        key = (xi.tobytes(), relaxed)
        solver = self._cache.get(key)
        if solver is None:
            inst = self.inst
            E, e = _dynamics_blocks(inst, xi)
            nv = E.shape[1]
            A = np.vstack([E, self._rows])
            m_bounds = self._rows.shape[0]
            lo = np.concatenate([e, self._lo0])
            hi = np.concatenate([e, self._hi0])
            soft = np.full(A.shape[0], np.inf)
            if relaxed:
                soft[E.shape[0]:] = W_SLACK
            solver = AdmmSolver(self._cost, np.zeros(nv), A, lo, hi,
                                soft_weight=soft)
            if len(self._cache) >= self._cache_size:
                self._cache.pop(next(iter(self._cache)))
            self._cache[key] = solver
        return solver

    def _bounds_for(self, u0: np.ndarray, xi: np.ndarray) -> tuple:
        inst = self.inst
        E_rows = inst.horizon * inst.n_x
        e = np.empty(E_rows)
        e[:inst.n_x] = inst.a_of(0, xi) @ inst.x_init
        e[inst.n_x:] = 0.0
        lo = np.concatenate([e, self._lo0])
        hi = np.concatenate([e, self._hi0])
        n_dev = (inst.horizon - 1) * inst.n_u
        dev_lo = np.tile(u0 + inst.du_lo, inst.horizon - 1)
        dev_hi = np.tile(u0 + inst.du_hi, inst.horizon - 1)
        lo[-n_dev:] = dev_lo
        hi[-n_dev:] = dev_hi
        return lo, hi

    def eval(self, u0, xi, tol: float = 1e-8,
             max_iter: int = 20000) -> RecourseResult:
        inst = self.inst
        u0 = np.asarray(u0, dtype=np.float64).ravel()
        xi = np.asarray(xi, dtype=np.float64).ravel()
        if u0.size != inst.n_u or xi.size != inst.n_xi:
            raise ValueError("dimension mismatch in (u0, xi)")
        lo, hi = self._bounds_for(u0, xi)
        solver = self._solver_for(xi, relaxed=True)
        solver.set_bounds(lo, hi)
        info = solver.solve(tol, tol, max_iter)
        self.solves += 1
        q_fea = solver.penalty_mass()
        status = info.status
        if q_fea <= FEAS_EPS and info.status == "optimal":
            # feasible: re-solve with hard bounds from the relaxed optimum
            hard = self._solver_for(xi, relaxed=False)
            hard.set_bounds(lo, hi)
            hard.warm_start(info.x, np.clip(solver.A @ info.x, lo, hi), info.y)
            info2 = hard.solve(tol, tol, max_iter)
            self.solves += 1
            if info2.status == "optimal":
                info = info2
                q_fea = 0.0
            else:
                status = "solver_limit"
        elif info.status == "optimal":
            status = "infeasible_relaxed"
        q_obj = float(0.5 * info.x @ self._cost @ info.x)
        n_dev = (inst.horizon - 1) * inst.n_u
        dev_duals = info.y[-n_dev:].reshape(inst.horizon - 1, inst.n_u)
        N, n_x, n_u = inst.horizon, inst.n_x, inst.n_u
        y_opt = {"x": info.x[:N * n_x].reshape(N, n_x),
                 "u": info.x[N * n_x:].reshape(N - 1, n_u)}
        return RecourseResult(q_obj, q_fea, y_opt, dev_duals, status)

    def value_and_grad(self, u0, xi) -> tuple:
        """Relaxed-objective score and its envelope-theorem gradient in u0.

        Both deviation bounds shift one-for-one with u0, so the gradient is
        minus the summed deviation-row duals per input coordinate.
        """
        res = self.eval(u0, xi)
        grad = -res.multipliers.sum(axis=0)
        return res.score, grad, res


def eval_value_function(inst: HvacInstance, u0, xi,
                        solver: RecourseSolver | None = None) -> RecourseResult:
    """Exact recourse value: objective of the unrelaxed QP when feasible,
    otherwise the relaxed objective plus the total slack mass in ``q_fea``.
    Works for any xi, in or out of the uncertainty set."""
    if solver is None:
        solver = RecourseSolver(inst)
    return solver.eval(u0, xi)


# ---------------------------------------------------------------------------
# scenario master: min over u0 of max_i Q(u0, xi_i) by cutting planes
# ---------------------------------------------------------------------------


@dataclass
class MasterInfo:
    rounds: int
    converged: bool
    cut_count: int
    wall_time: float


def solve_master(inst: HvacInstance, scenarios, tol: float = 1e-6,
                 max_rounds: int = 100, solver: RecourseSolver | None = None,
                 cuts: list | None = None) -> tuple:
    """Kelley cutting planes on the convex piecewise-quadratic max of the
    relaxed recourse values over the scenario pool, over box-feasible u0.

    Cuts are theta >= Q(u_hat, xi_i) + g_i'(u0 - u_hat) with g_i from the
    deviation-bound duals.  ``cuts`` may carry a persistent cut pool so CCG
    iterations reuse earlier work.  Returns (u0_opt, theta, info).
    """
    t_start = time.perf_counter()
    if solver is None:
        solver = RecourseSolver(inst)
    scenarios = [np.asarray(s, dtype=np.float64).ravel() for s in scenarios]
    if not scenarios:
        raise ValueError("scenario list is empty")
    n_u = inst.n_u
    pool = cuts if cuts is not None else []

    def true_max(u0):
        vals = []
        for s in scenarios:
            val, grad, _ = solver.value_and_grad(u0, s)
            vals.append((val, grad))
        arg = int(np.argmax([v for v, _ in vals]))
        return vals, arg

    u_best = np.zeros(n_u)
    vals, _ = true_max(u_best)
    for val, grad in vals:
        pool.append((val, grad, u_best.copy()))
    best_val = max(v for v, _ in vals)
    converged = False
    rounds = 0
    for rounds in range(1, max_rounds + 1):
        # LP over (u0, theta): minimize theta subject to all cuts
        n_cut = len(pool)
        a_ub = np.zeros((n_cut, n_u + 1))
        b_ub = np.zeros(n_cut)
        for i, (val, grad, u_hat) in enumerate(pool):
            a_ub[i, :n_u] = grad
            a_ub[i, n_u] = -1.0
            b_ub[i] = grad @ u_hat - val
        c = np.zeros(n_u + 1)
        c[n_u] = 1.0
        bounds = [(inst.u_lo[j], inst.u_hi[j]) for j in range(n_u)]
        bounds.append((None, None))
        lp = linprog(c, A_ub=a_ub, b_ub=b_ub, bounds=bounds, method="highs")
        if not lp.success:
            break
        u_cand = lp.x[:n_u]
        theta_lp = lp.x[n_u]
        vals, _ = true_max(u_cand)
        cand_val = max(v for v, _ in vals)
        for val, grad in vals:
            pool.append((val, grad, u_cand.copy()))
        if cand_val < best_val:
            best_val = cand_val
            u_best = u_cand.copy()
        if cand_val - theta_lp <= tol * (1.0 + abs(cand_val)):
            converged = True
            break
    if not converged:
        import warnings
        warnings.warn(f"master: cutting planes hit the {max_rounds}-round cap",
                      RuntimeWarning)
    vals, _ = true_max(u_best)
    theta = max(v for v, _ in vals)
    info = MasterInfo(rounds, converged, len(pool),
                      time.perf_counter() - t_start)
    return u_best, float(theta), info


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

_ARRAY_FIELDS = ["a0", "b0", "a_sens", "b_sens", "p_cost", "r_cost",
                 "pf_cost", "x_lo", "x_hi", "u_lo", "u_hi", "du_lo", "du_hi",
                 "x_init"]


def instance_to_dict(inst: HvacInstance) -> dict:
    out = {"seed": inst.seed}
    for f in _ARRAY_FIELDS:
        arr = getattr(inst, f)
        out[f] = {"shape": list(arr.shape), "data": arr.ravel().tolist()}
    return out


def instance_from_dict(d: dict) -> HvacInstance:
    kwargs = {"seed": int(d["seed"])}
    for f in _ARRAY_FIELDS:
        spec = d[f]
        kwargs[f] = np.array(spec["data"], dtype=np.float64).reshape(spec["shape"])
    return HvacInstance(**kwargs).validate()


def save_instance(inst: HvacInstance, path) -> None:
    with open(path, "w") as f:
        json.dump(instance_to_dict(inst), f, sort_keys=True)
        f.write("\n")


def load_instance(path) -> HvacInstance:
    with open(path) as f:
        return instance_from_dict(json.load(f))


def with_overrides(inst: HvacInstance, **fields) -> HvacInstance:
    """Functional update (e.g. a test pinning x_init to zero)."""
    return dataclasses.replace(inst, **fields)
