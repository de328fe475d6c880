"""Uncertainty-set geometries: membership, sampling, projections, penalties.

Four geometries are supported: a box with an l1 budget, a budgeted polytope
with extra coupling halfplanes, an ellipsoid, and a Gaussian-mixture density
level set (nonconvex).  Each geometry provides

- ``contains``: membership within a tolerance,
- ``sample``: seeded draws covering the set,
- ``prox``: a projection-style proximal operator returning a member point,
- ``prox_with_jacobian``: the same map plus its almost-everywhere Jacobian,
  used when differentiating through the projection,
- ``budget_statistic`` and ``penalty_and_subgradient``: a scalar constraint
  functional S and the smoothed-hinge penalty built on it.

Set objects are immutable after construction and all operations are pure
given an explicit RNG, so they are safe to share across parallel workers.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .autodiff import smooth_hinge_value, smooth_hinge_deriv


class SamplingError(RuntimeError):
    """Rejection budget exhausted; carries diagnostics in the message."""


# ---------------------------------------------------------------------------
# set definitions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BoxSet:
    """{ xi : |xi_j| <= theta_j,  sum_j |xi_j| <= gamma }"""

    theta: np.ndarray
    gamma: float

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=np.float64)
        object.__setattr__(self, "theta", theta)
        if theta.ndim != 1 or np.any(theta <= 0):
            raise ValueError("theta must be a strictly positive vector")
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")

    @property
    def dim(self) -> int:
        return self.theta.size

    @property
    def center(self) -> np.ndarray:
        return np.zeros(self.dim)


@dataclass(frozen=True)
class PolySet:
    """Box-with-budget intersected with coupling halfplanes H xi <= h."""

    H: np.ndarray
    h: np.ndarray
    theta: np.ndarray
    gamma: float

    def __post_init__(self):
        H = np.atleast_2d(np.asarray(self.H, dtype=np.float64))
        h = np.asarray(self.h, dtype=np.float64).ravel()
        theta = np.asarray(self.theta, dtype=np.float64)
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "h", h)
        object.__setattr__(self, "theta", theta)
        if H.size and H.shape[0] != h.size:
            raise ValueError("H and h row counts differ")
        if H.size and np.any(np.linalg.norm(H, axis=1) == 0):
            raise ValueError("H has a zero row")
        if H.size and np.any(h < 0):
            raise ValueError("origin must satisfy H 0 <= h")
        if np.any(theta <= 0) or self.gamma <= 0:
            raise ValueError("theta must be positive and gamma > 0")

    @property
    def dim(self) -> int:
        return self.theta.size

    @property
    def m(self) -> int:
        return 0 if self.H.size == 0 else self.H.shape[0]

    @property
    def center(self) -> np.ndarray:
        return np.zeros(self.dim)

    def box_part(self) -> BoxSet:
        return BoxSet(self.theta, self.gamma)


@dataclass(frozen=True)
class EllipSet:
    """{ xi : (xi - center)^T Sigma^{-1} (xi - center) <= gamma^2 }"""

    sigma: np.ndarray
    gamma: float
    center: np.ndarray = None

    def __post_init__(self):
        sigma = np.asarray(self.sigma, dtype=np.float64)
        n = sigma.shape[0]
        center = (np.zeros(n) if self.center is None
                  else np.asarray(self.center, dtype=np.float64))
        object.__setattr__(self, "sigma", sigma)
        object.__setattr__(self, "center", center)
        if np.max(np.abs(sigma - sigma.T)) > 1e-10:
            raise ValueError("sigma must be symmetric to 1e-10")
        evals = np.linalg.eigvalsh(sigma)
        if evals.min() <= 1e-8:
            raise ValueError("sigma must have minimum eigenvalue > 1e-8")
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        object.__setattr__(self, "_inv", np.linalg.inv(sigma))
        object.__setattr__(self, "_chol", np.linalg.cholesky(sigma))

    @property
    def dim(self) -> int:
        return self.sigma.shape[0]

    def mnorm(self, v: np.ndarray) -> float:
        """Mahalanobis norm ||v||_{Sigma^{-1}}."""
        return float(np.sqrt(v @ self._inv @ v))


@dataclass(frozen=True)
class GmmSet:
    """{ xi : sum_c w_c N(xi | mu_c, Sigma_c) >= rho }  (nonconvex)"""

    components: tuple
    rho: float

    def __post_init__(self):
        comps = []
        for w, mu, cov in self.components:
            mu = np.asarray(mu, dtype=np.float64)
            cov = np.asarray(cov, dtype=np.float64)
            if w <= 0:
                raise ValueError("component weights must be positive")
            if np.linalg.eigvalsh(cov).min() <= 0:
                raise ValueError("component covariance must be SPD")
            comps.append((float(w), mu, cov))
        object.__setattr__(self, "components", tuple(comps))
        if abs(sum(w for w, _, _ in comps) - 1.0) > 1e-10:
            raise ValueError("component weights must sum to 1 within 1e-10")
        if self.rho <= 0:
            raise ValueError("rho must be positive")
        n = comps[0][1].size
        invs, chols, radii, norms = [], [], [], []
        for w, mu, cov in comps:
            invs.append(np.linalg.inv(cov))
            chols.append(np.linalg.cholesky(cov))
            norm_c = (2.0 * np.pi) ** (n / 2.0) * np.sqrt(np.linalg.det(cov))
            norms.append(norm_c)
            # radius of the single-component level set { w N(.|mu,cov) >= rho }
            r2 = -2.0 * np.log(self.rho * norm_c / w)
            if r2 <= 0:
                raise ValueError(
                    f"component level set is empty: rho={self.rho} exceeds the "
                    f"component peak {w / norm_c}")
            radii.append(np.sqrt(r2))
        object.__setattr__(self, "_invs", tuple(invs))
        object.__setattr__(self, "_chols", tuple(chols))
        object.__setattr__(self, "_radii", tuple(radii))
        object.__setattr__(self, "_norms", tuple(norms))
        for _, mu, _ in comps:
            if self.density(mu) < self.rho:
                raise ValueError("mixture density at a component mean is below rho")

    @property
    def dim(self) -> int:
        return self.components[0][1].size

    def density(self, xi: np.ndarray) -> float:
        xi = np.asarray(xi, dtype=np.float64)
        total = 0.0
        for (w, mu, _), inv, norm_c in zip(self.components, self._invs, self._norms):
            d = xi - mu
            total += w * np.exp(-0.5 * d @ inv @ d) / norm_c
        return float(total)

    def density_grad(self, xi: np.ndarray) -> np.ndarray:
        xi = np.asarray(xi, dtype=np.float64)
        g = np.zeros_like(xi)
        for (w, mu, _), inv, norm_c in zip(self.components, self._invs, self._norms):
            d = xi - mu
            g += w * np.exp(-0.5 * d @ inv @ d) / norm_c * (-(inv @ d))
        return g

    def component_radius(self, c: int) -> float:
        return self._radii[c]


UncertaintySet = BoxSet | PolySet | EllipSet | GmmSet


@dataclass(frozen=True)
class PenaltySpec:
    """Weights and smoothing of the budget penalty r = alpha * hinge(S - T)."""

    alpha_weight: float = 1.0
    beta_weight: float = 10.0
    smoothing: float = 1e-3

    def __post_init__(self):
        if self.alpha_weight < 0 or self.beta_weight < 0:
            raise ValueError("penalty weights must be nonnegative")
        if self.smoothing <= 0:
            raise ValueError("smoothing width must be positive")


# ---------------------------------------------------------------------------
# membership
# ---------------------------------------------------------------------------


def contains(set_: UncertaintySet, xi, tol: float = 1e-9) -> bool:
    """True iff all defining inequalities hold within tol.

    For the GMM level set the tolerance is relative to rho:
    density >= rho * (1 - tol).
    """
    xi = np.asarray(xi, dtype=np.float64).ravel()
    if xi.size != set_.dim:
        raise ValueError(f"dimension mismatch: {xi.size} vs {set_.dim}")
    if isinstance(set_, BoxSet):
        return bool(np.all(np.abs(xi) <= set_.theta + tol)
                    and np.sum(np.abs(xi)) <= set_.gamma + tol)
    if isinstance(set_, PolySet):
        ok_box = contains(set_.box_part(), xi, tol)
        ok_hp = set_.m == 0 or bool(np.all(set_.H @ xi <= set_.h + tol))
        return ok_box and ok_hp
    if isinstance(set_, EllipSet):
        return set_.mnorm(xi - set_.center) <= set_.gamma + tol
    if isinstance(set_, GmmSet):
        return set_.density(xi) >= set_.rho * (1.0 - tol)
    raise TypeError(f"unknown set type {type(set_)}")


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

_REJECT_CAP = 100_000
_POLY_REJECT_FALLBACK = 10_000


def sample(set_: UncertaintySet, rng: np.random.Generator) -> np.ndarray:
    """One draw covering the set (uniform-ish; see each branch)."""
    if isinstance(set_, BoxSet):
        for _ in range(_REJECT_CAP):
            xi = rng.uniform(-set_.theta, set_.theta)
            if np.sum(np.abs(xi)) <= set_.gamma:
                return xi
        raise SamplingError(f"box rejection cap {_REJECT_CAP} hit "
                            f"(theta={set_.theta}, gamma={set_.gamma})")
    if isinstance(set_, PolySet):
        box = set_.box_part()
        for k in range(_POLY_REJECT_FALLBACK):
            xi = sample(box, rng)
            if set_.m == 0 or np.all(set_.H @ xi <= set_.h):
                return xi
        return _hit_and_run(set_, rng)
    if isinstance(set_, EllipSet):
        u = rng.normal(size=set_.dim)
        u /= np.linalg.norm(u)
        r = set_.gamma * rng.uniform() ** (1.0 / set_.dim)
        return set_.center + r * (set_._chol @ u)
    if isinstance(set_, GmmSet):
        weights = np.array([w for w, _, _ in set_.components])
        for _ in range(_POLY_REJECT_FALLBACK):
            c = rng.choice(len(weights), p=weights)
            _, mu, _ = set_.components[c]
            xi = mu + set_._chols[c] @ rng.normal(size=set_.dim)
            if set_.density(xi) >= set_.rho:
                return xi
        raise SamplingError(f"GMM rejection cap {_POLY_REJECT_FALLBACK} hit "
                            f"(rho={set_.rho})")
    raise TypeError(f"unknown set type {type(set_)}")


def sample_many(set_: UncertaintySet, n: int, rng: np.random.Generator) -> np.ndarray:
    return np.stack([sample(set_, rng) for _ in range(n)])


def _hit_and_run(set_: PolySet, rng: np.random.Generator,
                 burn: int = 200) -> np.ndarray:
    """Fallback sampler for polytopes with tiny rejection acceptance."""
    x = np.zeros(set_.dim)  # origin is feasible by construction
    for _ in range(burn):
        d = rng.normal(size=set_.dim)
        d /= np.linalg.norm(d)
        lo = -_chord_extent(set_, x, -d)
        hi = _chord_extent(set_, x, d)
        x = x + rng.uniform(lo, hi) * d
    return x


def _chord_extent(set_: PolySet, x: np.ndarray, d: np.ndarray) -> float:
    """Largest t >= 0 with x + t d in the set, by bisection (set is convex)."""
    hi = 1.0
    while contains(set_, x + hi * d, 1e-12) and hi < 1e6:
        hi *= 2.0
    lo = 0.0
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if contains(set_, x + mid * d, 1e-12):
            lo = mid
        else:
            hi = mid
    return lo


# ---------------------------------------------------------------------------
# projections / proximal operators
# ---------------------------------------------------------------------------


def project_l1_ball(v, gamma: float) -> np.ndarray:
    """Exact Euclidean projection onto {||x||_1 <= gamma} by sort-and-threshold."""
    v = np.asarray(v, dtype=np.float64).ravel()
    if gamma < 0:
        raise ValueError("gamma must be nonnegative")
    if np.sum(np.abs(v)) <= gamma:
        return v.copy()
    a = np.sort(np.abs(v))[::-1]
    cumsum = np.cumsum(a)
    k = np.arange(1, v.size + 1)
    valid = a - (cumsum - gamma) / k > 0
    kstar = int(np.max(np.nonzero(valid)[0])) + 1
    tau = (cumsum[kstar - 1] - gamma) / kstar
    # soft threshold: sign(v) * max(|v| - tau, 0) == v - clip(v, -tau, tau)
    return v - np.clip(v, -tau, tau)


def prox_box(set_: BoxSet, v) -> np.ndarray:
    """Clamp to [-theta, theta], then project onto the l1 budget ball."""
    v = np.asarray(v, dtype=np.float64).ravel()
    return project_l1_ball(np.clip(v, -set_.theta, set_.theta), set_.gamma)


def prox_ellip(set_: EllipSet, v) -> np.ndarray:
    """Radial scaling toward the center: xi <- xi * min(1, gamma/||xi||)."""
    v = np.asarray(v, dtype=np.float64).ravel()
    d = v - set_.center
    norm = set_.mnorm(d)
    if norm <= set_.gamma:
        return v.copy()
    return set_.center + d * (set_.gamma / norm)


def prox_poly(set_: PolySet, v, max_sweeps: int = 2000,
              tol: float = 1e-10) -> np.ndarray:
    """Exact projection onto the polytope: Dykstra alternating projections
    over the box, the budget ball, and each coupling halfplane, accelerated
    by an active-face polish (equality-constrained projection with a KKT
    check) once the active set has settled.

    On non-convergence the best iterate is returned and a warning recorded
    via ``warnings.warn``.
    """
    import warnings

    v = np.asarray(v, dtype=np.float64).ravel()
    projectors = [lambda x: np.clip(x, -set_.theta, set_.theta),
                  lambda x: project_l1_ball(x, set_.gamma)]
    for i in range(set_.m):
        a, b = set_.H[i], set_.h[i]
        projectors.append(lambda x, a=a, b=b: _halfplane(x, a, b))
    x = v.copy()
    corrections = [np.zeros_like(v) for _ in projectors]
    for sweep in range(1, max_sweeps + 1):
        drift = 0.0  # total correction movement over the sweep
        for i, proj in enumerate(projectors):
            y = proj(x + corrections[i])
            new_corr = x + corrections[i] - y
            drift += float(np.sum((new_corr - corrections[i]) ** 2))
            corrections[i] = new_corr
            x = y
        if sweep >= 5 and sweep % 5 == 0:
            polished = _poly_polish(set_, v, x)
            if polished is not None:
                return polished
        # iterates can repeat across a sweep while corrections still move,
        # so convergence is certified on the corrections, not on x
        if _poly_violation(set_, x) < tol and drift < tol * tol:
            return x
    warnings.warn(f"prox_poly: no convergence in {max_sweeps} sweeps "
                  f"(violation {_poly_violation(set_, x):.2e})", RuntimeWarning)
    return x


def _poly_polish(set_: PolySet, v: np.ndarray, x: np.ndarray,
                 act_tol: float = 1e-6) -> np.ndarray | None:
    """Guess the active face from iterate ``x``, project ``v`` onto its
    affine hull, and verify KKT.  Returns the exact projection or None."""
    n = v.size
    rows, kinds = [], []  # kind: 'box', 'budget', 'zero', 'hp'
    for j in range(n):
        if set_.theta[j] - abs(x[j]) < act_tol:
            e = np.zeros(n)
            e[j] = 1.0 if x[j] >= 0 else -1.0
            rows.append((e, set_.theta[j]))
            kinds.append("box")
    budget_active = set_.gamma - np.sum(np.abs(x)) < act_tol
    if budget_active:
        s = np.where(np.abs(x) < act_tol, 0.0, np.sign(x))
        rows.append((s, set_.gamma))
        kinds.append("budget")
        for j in range(n):
            if abs(x[j]) < act_tol:
                e = np.zeros(n)
                e[j] = 1.0
                rows.append((e, 0.0))
                kinds.append("zero")
    for i in range(set_.m):
        if set_.h[i] - set_.H[i] @ x < act_tol:
            rows.append((set_.H[i], set_.h[i]))
            kinds.append("hp")
    if not rows:
        p = v
        return p.copy() if _poly_violation(set_, p) <= 1e-12 else None
    A = np.stack([r for r, _ in rows])
    b = np.array([c for _, c in rows])
    # projection onto {A p = b}: p = v - A^T mult with A A^T mult = A v - b
    mult, *_ = np.linalg.lstsq(A @ A.T, A @ v - b, rcond=None)
    p = v - A.T @ mult
    if np.max(np.abs(A @ p - b)) > 1e-9 or _poly_violation(set_, p) > 1e-12:
        return None
    # dual feasibility: box/budget/halfplane multipliers nonnegative; a
    # zeroed coordinate's free multiplier must not exceed the budget one
    mu = 0.0
    for m_i, kind in zip(mult, kinds):
        if kind == "budget":
            mu = m_i
    for m_i, kind in zip(mult, kinds):
        if kind in ("box", "budget", "hp") and m_i < -1e-10:
            return None
        if kind == "zero" and abs(m_i) > mu + 1e-10:
            return None
    return p


def _halfplane(x: np.ndarray, a: np.ndarray, b: float) -> np.ndarray:
    viol = a @ x - b
    if viol <= 0:
        return x
    return x - a * (viol / (a @ a))


def _poly_violation(set_: PolySet, x: np.ndarray) -> float:
    worst = max(float(np.max(np.abs(x) - set_.theta)),
                float(np.sum(np.abs(x)) - set_.gamma))
    if set_.m:
        worst = max(worst, float(np.max(set_.H @ x - set_.h)))
    return worst


def prox_gmm(set_: GmmSet, v) -> np.ndarray:
    """Return v if the mixture density already clears rho; otherwise project
    radially onto the nearest component's Mahalanobis ellipsoid (ties to the
    lowest component index)."""
    v = np.asarray(v, dtype=np.float64).ravel()
    if set_.density(v) >= set_.rho:
        return v.copy()
    dists = np.array([np.sqrt((v - mu) @ inv @ (v - mu))
                      for (_, mu, _), inv in zip(set_.components, set_._invs)])
    c = int(np.argmin(dists))  # argmin takes the first index on ties
    _, mu, _ = set_.components[c]
    r = set_.component_radius(c)
    return mu + (v - mu) * (r / dists[c])


def prox(set_: UncertaintySet, v) -> np.ndarray:
    if isinstance(set_, BoxSet):
        return prox_box(set_, v)
    if isinstance(set_, PolySet):
        return prox_poly(set_, v)
    if isinstance(set_, EllipSet):
        return prox_ellip(set_, v)
    if isinstance(set_, GmmSet):
        return prox_gmm(set_, v)
    raise TypeError(f"unknown set type {type(set_)}")


# ---------------------------------------------------------------------------
# a.e. Jacobians of the proximal maps (for differentiating through them)
# ---------------------------------------------------------------------------


def _l1_jacobian(w: np.ndarray, gamma: float, p: np.ndarray) -> np.ndarray:
    n = w.size
    if np.sum(np.abs(w)) <= gamma:
        return np.eye(n)
    active = np.abs(p) > 0
    s = np.sign(p) * active
    k = active.sum()
    J = np.diag(active.astype(float))
    if k > 0:
        J -= np.outer(s, s) / k
    return J


def prox_with_jacobian(set_: UncertaintySet, v) -> tuple:
    """(prox(v), J) with J the almost-everywhere Jacobian of the prox map."""
    v = np.asarray(v, dtype=np.float64).ravel()
    n = v.size
    if isinstance(set_, BoxSet):
        w = np.clip(v, -set_.theta, set_.theta)
        p = project_l1_ball(w, set_.gamma)
        J_clamp = np.diag((np.abs(v) < set_.theta).astype(float))
        return p, _l1_jacobian(w, set_.gamma, p) @ J_clamp
    if isinstance(set_, PolySet):
        p = prox_poly(set_, v)
        # exact projection onto a polyhedron: Jacobian is the orthogonal
        # projector onto the affine hull of the active face
        A = _poly_face_rows(set_, p)
        if A is None:
            return p, np.eye(n)
        return p, np.eye(n) - np.linalg.pinv(A) @ A
    if isinstance(set_, EllipSet):
        d = v - set_.center
        norm = set_.mnorm(d)
        if norm <= set_.gamma:
            return v.copy(), np.eye(n)
        inv = set_._inv
        scale = set_.gamma / norm
        J = scale * (np.eye(n) - np.outer(d, inv @ d) / (norm * norm))
        return set_.center + scale * d, J
    if isinstance(set_, GmmSet):
        if set_.density(v) >= set_.rho:
            return v.copy(), np.eye(n)
        p = prox_gmm(set_, v)
        dists = np.array([np.sqrt((v - mu) @ inv @ (v - mu))
                          for (_, mu, _), inv in zip(set_.components, set_._invs)])
        c = int(np.argmin(dists))
        _, mu, _ = set_.components[c]
        inv = set_._invs[c]
        d = v - mu
        norm = dists[c]
        scale = set_.component_radius(c) / norm
        J = scale * (np.eye(n) - np.outer(d, inv @ d) / (norm * norm))
        return p, J
    raise TypeError(f"unknown set type {type(set_)}")


# ---------------------------------------------------------------------------
# batched variants (rows of V are independent points); used on hot paths
# ---------------------------------------------------------------------------


def _l1_rows(V: np.ndarray, gamma: float) -> np.ndarray:
    """Row-wise exact l1-ball projection."""
    absV = np.abs(V)
    inside = absV.sum(axis=1) <= gamma
    a = np.sort(absV, axis=1)[:, ::-1]
    cumsum = np.cumsum(a, axis=1)
    k = np.arange(1, V.shape[1] + 1)
    valid = a - (cumsum - gamma) / k > 0
    kstar = valid.shape[1] - np.argmax(valid[:, ::-1], axis=1)
    tau = (cumsum[np.arange(V.shape[0]), kstar - 1] - gamma) / kstar
    tau = np.where(inside, 0.0, np.maximum(tau, 0.0))
    return V - np.clip(V, -tau[:, None], tau[:, None])


def prox_batch(set_: UncertaintySet, V: np.ndarray) -> np.ndarray:
    """Row-wise prox; equivalent to stacking ``prox`` over rows."""
    V = np.atleast_2d(np.asarray(V, dtype=np.float64))
    if isinstance(set_, BoxSet):
        return _l1_rows(np.clip(V, -set_.theta, set_.theta), set_.gamma)
    if isinstance(set_, EllipSet):
        D = V - set_.center
        norms = np.sqrt(np.einsum("bi,ij,bj->b", D, set_._inv, D))
        scale = np.minimum(1.0, set_.gamma / np.maximum(norms, 1e-300))
        return set_.center + D * scale[:, None]
    if isinstance(set_, GmmSet):
        out = V.copy()
        dens = np.array([set_.density(v) for v in V])
        todo = dens < set_.rho
        for i in np.nonzero(todo)[0]:
            out[i] = prox_gmm(set_, V[i])
        return out
    if isinstance(set_, PolySet):
        return _prox_poly_rows(set_, V)
    raise TypeError(f"unknown set type {type(set_)}")


def _prox_poly_rows(set_: PolySet, V: np.ndarray, max_sweeps: int = 5000,
                    tol: float = 1e-10) -> np.ndarray:
    """Row-wise Dykstra; same algorithm as ``prox_poly``, vectorized.
    Rows converge independently and are frozen once their corrections settle."""
    import warnings

    n_proj = 2 + set_.m
    out = V.copy()
    X = V.copy()
    corr = np.zeros((n_proj,) + V.shape)
    live = np.arange(V.shape[0])
    for sweep in range(1, max_sweeps + 1):
        drift = np.zeros(X.shape[0])
        for i in range(n_proj):
            arg = X + corr[i]
            if i == 0:
                Y = np.clip(arg, -set_.theta, set_.theta)
            elif i == 1:
                Y = _l1_rows(arg, set_.gamma)
            else:
                a, b = set_.H[i - 2], set_.h[i - 2]
                viol = np.maximum(arg @ a - b, 0.0)
                Y = arg - np.outer(viol / (a @ a), a)
            new_corr = arg - Y
            drift += np.sum((new_corr - corr[i]) ** 2, axis=1)
            corr[i] = new_corr
            X = Y
        done = drift < tol * tol
        if sweep >= 5 and sweep % 5 == 0:
            for r in np.nonzero(~done)[0]:
                polished = _poly_polish(set_, V[live[r]], X[r])
                if polished is not None:
                    X[r] = polished
                    done[r] = True
        if np.any(done):
            out[live[done]] = X[done]
            keep = ~done
            live, X, corr = live[keep], X[keep], corr[:, keep]
            if live.size == 0:
                return out
    warnings.warn(f"prox_poly rows: {live.size} rows did not converge in "
                  f"{max_sweeps} sweeps", RuntimeWarning)
    out[live] = X
    return out


def _poly_face_rows(set_: PolySet, p: np.ndarray,
                    tol: float = 1e-7) -> np.ndarray | None:
    """Gradient rows of the constraints active at a projected point."""
    n = p.size
    rows = []
    for j in range(n):
        if set_.theta[j] - abs(p[j]) < tol:
            e = np.zeros(n)
            e[j] = np.sign(p[j]) if p[j] != 0 else 1.0
            rows.append(e)
    if set_.gamma - np.sum(np.abs(p)) < tol:
        rows.append(np.sign(p))
        for j in range(n):
            if abs(p[j]) < tol:
                e = np.zeros(n)
                e[j] = 1.0
                rows.append(e)
    for i in range(set_.m):
        if set_.h[i] - set_.H[i] @ p < tol:
            rows.append(set_.H[i])
    return np.stack(rows) if rows else None


def prox_vjp_batch(set_: UncertaintySet, V: np.ndarray, G: np.ndarray,
                   P: np.ndarray | None = None) -> np.ndarray:
    """Row-wise J(V_b)^T G_b for the a.e. Jacobian of the prox map.

    ``P`` may carry precomputed ``prox_batch(set_, V)`` outputs to avoid
    re-projecting (the polytope Jacobian only needs the active face at P).
    """
    V = np.atleast_2d(np.asarray(V, dtype=np.float64))
    G = np.atleast_2d(np.asarray(G, dtype=np.float64))
    if isinstance(set_, BoxSet):
        W = np.clip(V, -set_.theta, set_.theta)
        P = _l1_rows(W, set_.gamma)
        out = G.copy()
        tight = np.abs(W).sum(axis=1) > set_.gamma
        if np.any(tight):
            active = (np.abs(P[tight]) > 0)
            s = np.sign(P[tight]) * active
            k = np.maximum(active.sum(axis=1), 1)
            g = G[tight] * active
            out[tight] = g - s * ((s * g).sum(axis=1) / k)[:, None]
        return out * (np.abs(V) < set_.theta)
    if isinstance(set_, EllipSet):
        D = V - set_.center
        norms2 = np.einsum("bi,ij,bj->b", D, set_._inv, D)
        norms = np.sqrt(norms2)
        outside = norms > set_.gamma
        out = G.copy()
        if np.any(outside):
            d = D[outside]
            md = d @ set_._inv
            scale = (set_.gamma / norms[outside])[:, None]
            # J = s (I - d (Md)^T / n^2); J^T g = s (g - (Md)(d.g)/n^2)
            dot = np.sum(d * G[outside], axis=1) / norms2[outside]
            out[outside] = scale * (G[outside] - md * dot[:, None])
        return out
    if isinstance(set_, PolySet):
        if P is None:
            P = prox_batch(set_, V)
        out = G.copy()
        for b in range(V.shape[0]):
            A = _poly_face_rows(set_, P[b])
            if A is None:
                continue
            coeff, *_ = np.linalg.lstsq(A @ A.T, A @ G[b], rcond=None)
            out[b] = G[b] - A.T @ coeff
        return out
    if isinstance(set_, GmmSet):
        out = np.empty_like(G)
        for b in range(V.shape[0]):
            _, J = prox_with_jacobian(set_, V[b])
            out[b] = J.T @ G[b]
        return out
    raise TypeError(f"unknown set type {type(set_)}")


def penalty_batch(set_: UncertaintySet, spec: PenaltySpec,
                  V: np.ndarray) -> tuple:
    """Row-wise penalty values and subgradients."""
    V = np.atleast_2d(np.asarray(V, dtype=np.float64))
    thr = budget_threshold(set_)
    if isinstance(set_, (BoxSet, PolySet)):
        stats = np.sum(np.abs(V - set_.center) / set_.theta, axis=1)
        grads = np.sign(V - set_.center) / set_.theta
    elif isinstance(set_, EllipSet):
        D = V - set_.center
        stats = np.einsum("bi,ij,bj->b", D, set_._inv, D)
        grads = 2.0 * D @ set_._inv
    elif isinstance(set_, GmmSet):
        stats = np.array([set_.rho - set_.density(v) for v in V])
        grads = np.stack([-set_.density_grad(v) for v in V])
    else:
        raise TypeError(f"unknown set type {type(set_)}")
    t = stats - thr
    w = spec.smoothing
    r = spec.alpha_weight * smooth_hinge_value(t, w)
    g = spec.alpha_weight * smooth_hinge_deriv(t, w)[:, None] * grads
    g[t <= 0.0] = 0.0
    r = np.where(t <= 0.0, 0.0, r)
    return r, g


# ---------------------------------------------------------------------------
# budget statistic and penalty
# ---------------------------------------------------------------------------


def budget_statistic(set_: UncertaintySet, xi) -> float:
    """Scalar constraint functional S(xi; omega):

    box/poly: weighted l1 deviation sum_i |xi_i - center_i| / theta_i
    ellipsoid: quadratic form (xi - center)^T Sigma^{-1} (xi - center)
    GMM: rho - mixture density (level set is S <= 0)
    """
    xi = np.asarray(xi, dtype=np.float64).ravel()
    if xi.size != set_.dim:
        raise ValueError(f"dimension mismatch: {xi.size} vs {set_.dim}")
    if isinstance(set_, (BoxSet, PolySet)):
        return float(np.sum(np.abs(xi - set_.center) / set_.theta))
    if isinstance(set_, EllipSet):
        d = xi - set_.center
        return float(d @ set_._inv @ d)
    if isinstance(set_, GmmSet):
        return set_.rho - set_.density(xi)
    raise TypeError(f"unknown set type {type(set_)}")


def budget_statistic_grad(set_: UncertaintySet, xi) -> np.ndarray:
    xi = np.asarray(xi, dtype=np.float64).ravel()
    if isinstance(set_, (BoxSet, PolySet)):
        return np.sign(xi - set_.center) / set_.theta
    if isinstance(set_, EllipSet):
        return 2.0 * (set_._inv @ (xi - set_.center))
    if isinstance(set_, GmmSet):
        return -set_.density_grad(xi)
    raise TypeError(f"unknown set type {type(set_)}")


def budget_threshold(set_: UncertaintySet) -> float:
    """Hinge threshold for the penalty, in the units of ``budget_statistic``,
    chosen so the hinge is inactive on the whole set:

    box/poly: max of the weighted l1 statistic over the box+budget region
    ellipsoid: gamma^2 (the set is S <= gamma^2)
    GMM: 0 (the rho shift is absorbed into S)
    """
    if isinstance(set_, (BoxSet, PolySet)):
        # maximize sum y_i / theta_i s.t. 0 <= y_i <= theta_i, sum y_i <= gamma:
        # greedy fill by largest 1/theta_i
        order = np.argsort(set_.theta)
        remaining = set_.gamma
        total = 0.0
        for j in order:
            take = min(set_.theta[j], remaining)
            total += take / set_.theta[j]
            remaining -= take
            if remaining <= 0:
                break
        return float(total)
    if isinstance(set_, EllipSet):
        return float(set_.gamma ** 2)
    if isinstance(set_, GmmSet):
        return 0.0
    raise TypeError(f"unknown set type {type(set_)}")


def penalty_and_subgradient(set_: UncertaintySet, spec: PenaltySpec,
                            xi) -> tuple:
    """r = alpha * hinge(S - T) and its gradient alpha * hinge'(S - T) * grad S.

    Exactly zero (value and gradient) at and below the threshold, hence on
    every member of the set.
    """
    xi = np.asarray(xi, dtype=np.float64).ravel()
    t = budget_statistic(set_, xi) - budget_threshold(set_)
    if t <= 0.0:
        return 0.0, np.zeros(set_.dim)
    w = spec.smoothing
    r = spec.alpha_weight * float(smooth_hinge_value(t, w))
    g = spec.alpha_weight * float(smooth_hinge_deriv(t, w)) * \
        budget_statistic_grad(set_, xi)
    return r, g


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def set_to_dict(set_: UncertaintySet) -> dict:
    if isinstance(set_, BoxSet):
        return {"kind": "box", "theta": set_.theta.tolist(),
                "gamma": set_.gamma}
    if isinstance(set_, PolySet):
        return {"kind": "poly", "H": set_.H.tolist(), "h": set_.h.tolist(),
                "theta": set_.theta.tolist(), "gamma": set_.gamma}
    if isinstance(set_, EllipSet):
        return {"kind": "ellip", "sigma": set_.sigma.tolist(),
                "gamma": set_.gamma, "center": set_.center.tolist()}
    if isinstance(set_, GmmSet):
        return {"kind": "gmm", "rho": set_.rho,
                "components": [{"weight": w, "mean": mu.tolist(),
                                "cov": cov.tolist()}
                               for w, mu, cov in set_.components]}
    raise TypeError(f"unknown set type {type(set_)}")


def set_from_dict(d: dict) -> UncertaintySet:
    kind = d["kind"]
    if kind == "box":
        return BoxSet(np.array(d["theta"]), float(d["gamma"]))
    if kind == "poly":
        return PolySet(np.array(d["H"]), np.array(d["h"]),
                       np.array(d["theta"]), float(d["gamma"]))
    if kind == "ellip":
        return EllipSet(np.array(d["sigma"]), float(d["gamma"]),
                        np.array(d["center"]))
    if kind == "gmm":
        comps = [(c["weight"], np.array(c["mean"]), np.array(c["cov"]))
                 for c in d["components"]]
        return GmmSet(tuple(comps), float(d["rho"]))
    raise ValueError(f"unknown set kind '{kind}'")


def save_set(set_: UncertaintySet, path) -> None:
    with open(path, "w") as f:
        json.dump(set_to_dict(set_), f, indent=1, sort_keys=True)
        f.write("\n")


def load_set(path) -> UncertaintySet:
    with open(path) as f:
        return set_from_dict(json.load(f))


def set_kind(set_: UncertaintySet) -> str:
    return set_to_dict(set_)["kind"]
