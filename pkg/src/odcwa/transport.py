"""Entropic optimal transport between small empirical measures.

The Sinkhorn solver works on dual potentials in the log domain with
geometric annealing of the regularisation (epsilon-scaling), so blur values
far below the cost scale still converge in a few hundred sweeps; stalled
stages are finished with Newton steps on the same dual.  The entropic
weight is ``rho = blur ** p``.

:func:`exact_ot` is a brute-force LP solver used as a test oracle; it
enumerates every vertex of the transportation polytope.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .numerics import NumericalError, log_sum_exp_rows

EXACT_OT_MAX_SUPPORT = 5

# per-stage budget and tolerance for the annealing stages before the last
STAGE_SWEEPS = 30
STAGE_TOL = 1e-4
SYMMETRIC_SWEEPS = 200


def _as_weights(w, n: int | None = None) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64).reshape(-1)
    if n is not None and w.shape[0] != n:
        raise ValueError(f"weights have length {w.shape[0]}, expected {n}")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite and nonnegative")
    if abs(w.sum() - 1.0) > 1e-9:
        raise ValueError(f"weights must sum to 1 (got {w.sum()!r})")
    return w


@dataclass(frozen=True)
class EmpiricalMeasure:
    """Weighted point cloud in R^d.  ``points`` has shape (n, d)."""

    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2 or pts.shape[0] == 0:
            raise ValueError("a measure needs at least one point")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", _as_weights(self.weights, pts.shape[0]))

    @classmethod
    def uniform(cls, points) -> "EmpiricalMeasure":
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim == 1:
            pts = pts[:, None]
        n = pts.shape[0]
        return cls(pts, np.full(n, 1.0 / n))

    @classmethod
    def dirac(cls, point) -> "EmpiricalMeasure":
        return cls(np.asarray(point, dtype=np.float64).reshape(1, -1), np.ones(1))

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass
class TransportPlan:
    plan: np.ndarray
    source_marginal: np.ndarray
    target_marginal: np.ndarray
    residual: float = 0.0
    converged: bool = True
    iterations: int = 0
    extras: dict = field(default_factory=dict)

    def cost(self, C: np.ndarray) -> float:
        return float(np.sum(self.plan * C))

    def entropy(self) -> float:
        T = self.plan[self.plan > 0]
        return float(-np.sum(T * np.log(T)))


def marginal_residual(T: np.ndarray, a: np.ndarray, b: np.ndarray) -> float:
    """Max of the L1 deviations of the row and column sums."""
    return float(max(np.abs(T.sum(axis=1) - a).sum(), np.abs(T.sum(axis=0) - b).sum()))


def cost_matrix(P: EmpiricalMeasure, Q: EmpiricalMeasure, p: float = 1.0) -> np.ndarray:
    """``C[k, l] = |x_k - y_l|_1 ** p``."""
    if p < 1:
        raise ValueError("cost power p must be >= 1")
    if P.dim != Q.dim:
        raise ValueError(f"dimension mismatch: {P.dim} vs {Q.dim}")
    C = np.abs(P.points[:, None, :] - Q.points[None, :, :]).sum(axis=-1)
    return C if p == 1 else C**p


def _annealing_schedule(c_max: float, rho: float, scaling: float) -> list[float]:
    eps = [rho]
    e = rho
    while e < c_max:
        e /= scaling
        eps.append(e)
    return eps[::-1]


def sinkhorn_plan(
    C,
    a,
    b,
    blur: float,
    max_iter: int = 1000,
    tol: float = 1e-6,
    p: float = 1.0,
    scaling: float = 0.5,
) -> TransportPlan:
    """Entropy-regularised transport plan for cost ``C`` and marginals ``a``, ``b``.

    Minimises ``<T, C> + rho * sum T (log T - 1)`` over couplings of
    ``a`` and ``b`` with ``rho = blur ** p``.  The regulariser is annealed
    from ``max(C)`` down to ``rho`` by factor ``scaling``, each stage
    warm-started from the previous potentials.  ``max_iter`` counts every
    sweep and Newton step over all stages; a plan whose L1 marginal
    residual misses ``tol`` comes back with ``converged=False``.
    """
    C = np.asarray(C, dtype=np.float64)
    if C.ndim != 2:
        raise ValueError("cost must be a matrix")
    n, m = C.shape
    a = _as_weights(a, n)
    b = _as_weights(b, m)
    if np.any(C < 0) or not np.all(np.isfinite(C)):
        raise ValueError("cost must be finite and nonnegative")
    if blur <= 0:
        raise ValueError("blur must be positive")
    rho = float(blur) ** p

    # zero-mass points carry no transport; solve on the support only
    ia = np.flatnonzero(a > 0)
    ib = np.flatnonzero(b > 0)
    Cs = C[np.ix_(ia, ib)]
    la, lb = np.log(a[ia]), np.log(b[ib])
    sa, sb = a[ia], b[ib]

    f = np.zeros(ia.size)
    g = np.zeros(ib.size)
    c_max = float(Cs.max()) if Cs.size else 0.0
    schedule = _annealing_schedule(c_max, rho, scaling)

    def g_update(f, eps):
        return -eps * log_sum_exp_rows(la[:, None] + (f[:, None] - Cs) / eps, axis=0)

    def f_update(g, eps):
        return -eps * log_sum_exp_rows(lb[None, :] + (g[None, :] - Cs) / eps, axis=1)

    def plan_at(f, g, eps):
        with np.errstate(over="ignore"):
            return np.exp(la[:, None] + lb[None, :] + (f[:, None] + g[None, :] - Cs) / eps)

    def row_residual(f, g, eps):
        return float(np.abs(plan_at(f, g, eps).sum(axis=1) - sa).sum())

    def check(*vs):
        if not all(np.all(np.isfinite(v)) for v in vs):
            raise NumericalError("numerical blow-up, increase blur")

    # After a g-update the column marginals are exact, so the row residual
    # is the whole error.  Each stage gets a few plain sweeps; if those stall
    # (near-degenerate LP, slow Sinkhorn contraction) the stage finishes with
    # damped Newton steps on f, each followed by an exact g-update.
    it = 0
    newton_steps = 0
    for stage, eps in enumerate(schedule):
        stage_tol = tol if stage == len(schedule) - 1 else max(tol, STAGE_TOL)
        res = np.inf
        for _ in range(STAGE_SWEEPS):
            if it >= max_iter:
                break
            f = f_update(g, eps)
            g = g_update(f, eps)
            it += 1
            check(f, g)
            res = row_residual(f, g, eps)
            if res <= stage_tol:
                break
        while it < max_iter and res > stage_tol:
            Ts = plan_at(f, g, eps)
            r, c = Ts.sum(axis=1), Ts.sum(axis=0)
            H = np.block([[np.diag(r), Ts], [Ts.T, np.diag(c)]]) / eps
            grad = np.concatenate([sa - r, sb - c])
            step = np.linalg.lstsq(H, grad, rcond=None)[0][: ia.size]
            t = 1.0
            while True:
                f_try = f + t * step
                g_try = g_update(f_try, eps)
                res_try = row_residual(f_try, g_try, eps)
                if (np.isfinite(res_try) and res_try < res) or t < 1e-6:
                    break
                t *= 0.5
            f, g, res = f_try, g_try, res_try
            check(f, g)
            it += 1
            newton_steps += 1

    Ts = plan_at(f, g, rho)
    T = np.zeros((n, m))
    T[np.ix_(ia, ib)] = Ts
    residual = marginal_residual(T, a, b)
    converged = residual <= tol
    return TransportPlan(
        plan=T,
        source_marginal=a,
        target_marginal=b,
        residual=residual,
        converged=converged,
        iterations=it,
        extras={"f": f, "g": g, "rho": rho, "newton_steps": newton_steps},
    )


def symmetric_sinkhorn_plan(
    C, a, blur: float, max_iter: int = 1000, tol: float = 1e-6, p: float = 1.0, scaling: float = 0.5
) -> TransportPlan:
    """Self-transport plan of ``a`` onto itself under a symmetric cost.

    The optimum has equal row and column potentials, so a single potential
    is iterated with the averaged update ``f <- (f + T(f)) / 2``, which
    converges in a handful of sweeps per annealing stage.  Falls back to
    :func:`sinkhorn_plan` if the symmetric sweeps miss ``tol``.
    """
    C = np.asarray(C, dtype=np.float64)
    n = C.shape[0]
    a = _as_weights(a, n)
    rho = float(blur) ** p
    ia = np.flatnonzero(a > 0)
    Cs = C[np.ix_(ia, ia)]
    la, sa = np.log(a[ia]), a[ia]
    f = np.zeros(ia.size)
    schedule = _annealing_schedule(float(Cs.max()), rho, scaling)
    it = 0
    res = np.inf
    for stage, eps in enumerate(schedule):
        final = stage == len(schedule) - 1
        for _ in range(max_iter if final else 1):
            if it >= max_iter:
                break
            f = 0.5 * (f - eps * log_sum_exp_rows(la[None, :] + (f[None, :] - Cs) / eps, axis=1))
            it += 1
            if final:
                Ts = np.exp(la[:, None] + la[None, :] + (f[:, None] + f[None, :] - Cs) / eps)
                res = float(np.abs(Ts.sum(axis=1) - sa).sum())
                if res <= tol or it >= SYMMETRIC_SWEEPS:
                    break
    if not np.all(np.isfinite(f)):
        raise NumericalError("numerical blow-up, increase blur")
    if res > tol:
        return sinkhorn_plan(C, a, a, blur, max_iter=max_iter, tol=tol, p=p, scaling=scaling)
    T = np.zeros((n, n))
    T[np.ix_(ia, ia)] = Ts
    return TransportPlan(T, a, a, marginal_residual(T, a, a), True, it, {"f": f, "rho": rho})


def entropic_cost(
    P: EmpiricalMeasure, Q: EmpiricalMeasure, p: float = 1.0, blur: float = 0.1, **kw
) -> tuple[float, TransportPlan, np.ndarray]:
    """Transport cost ``<T, C>`` at the Sinkhorn optimum, with its plan and cost matrix."""
    C = cost_matrix(P, Q, p)
    if P is Q or (
        P.points.shape == Q.points.shape
        and np.array_equal(P.points, Q.points)
        and np.array_equal(P.weights, Q.weights)
    ):
        if len(P) == 1:
            plan = TransportPlan(np.ones((1, 1)), P.weights, P.weights)
        else:
            plan = symmetric_sinkhorn_plan(C, P.weights, blur, p=p, **kw)
    elif len(P) == 1 or len(Q) == 1:
        # a Dirac marginal admits exactly one coupling
        T = np.outer(P.weights, Q.weights)
        plan = TransportPlan(T, P.weights, Q.weights, marginal_residual(T, P.weights, Q.weights))
    else:
        plan = sinkhorn_plan(C, P.weights, Q.weights, blur, p=p, **kw)
    return plan.cost(C), plan, C


def sinkhorn_divergence(
    P: EmpiricalMeasure,
    Q: EmpiricalMeasure,
    p: float = 1.0,
    blur: float = 0.1,
    **kw,
) -> float:
    """Debiased ``OT(P,Q) - OT(P,P)/2 - OT(Q,Q)/2`` with ``OT`` the entropic transport cost."""
    if P.dim != Q.dim:
        raise ValueError(f"dimension mismatch: {P.dim} vs {Q.dim}")
    pq, _, _ = entropic_cost(P, Q, p, blur, **kw)
    pp, _, _ = entropic_cost(P, P, p, blur, **kw)
    qq, _, _ = entropic_cost(Q, Q, p, blur, **kw)
    return pq - 0.5 * pp - 0.5 * qq


def cost_sensitivity(plan: TransportPlan, C) -> np.ndarray:
    """Derivative of ``<T*(C), C>`` with respect to every entry of ``C``.

    ``T*`` moves with ``C``, so the plan cannot simply be frozen.  From
    ``T = a b^T exp((f + g - C) / rho)`` and fixed marginals, one adjoint
    solve ``H [l; m] = [D 1; D^T 1]`` with ``D = T * C`` and
    ``H = [[diag(a), T], [T^T, diag(b)]]`` gives
    ``dV/dC_ij = T_ij (1 + (l_i + m_j - C_ij) / rho)``.
    Plans without an entropic weight (forced couplings) return ``T`` itself.
    """
    C = np.asarray(C, dtype=np.float64)
    T = plan.plan
    rho = plan.extras.get("rho")
    if rho is None:
        return T.copy()
    ia = np.flatnonzero(plan.source_marginal > 0)
    ib = np.flatnonzero(plan.target_marginal > 0)
    Ts, Cs = T[np.ix_(ia, ib)], C[np.ix_(ia, ib)]
    r, c = Ts.sum(axis=1), Ts.sum(axis=0)
    H = np.block([[np.diag(r), Ts], [Ts.T, np.diag(c)]])
    D = Ts * Cs
    # H is singular along (1, -1); the right-hand side is orthogonal to it
    lm = np.linalg.lstsq(H, np.concatenate([D.sum(axis=1), D.sum(axis=0)]), rcond=None)[0]
    lam, mu = lm[: ia.size], lm[ia.size :]
    G = np.zeros_like(T)
    G[np.ix_(ia, ib)] = Ts * (1.0 + (lam[:, None] + mu[None, :] - Cs) / rho)
    return G


def _optimal_vertices(C: np.ndarray, a: np.ndarray, b: np.ndarray):
    """Minimum cost over the vertices of U(a, b) and every vertex attaining it.

    Every basic feasible solution is supported on a spanning tree, and a
    tree always has a leaf whose edge carries that leaf's full residual.
    Peeling leaves therefore reaches every vertex through the greedy move
    "pick cell (i, j), ship min(r_i, c_j), retire the exhausted side",
    and every such sequence ends at a vertex.  The search is exhaustive over
    those moves, memoised on the residual state, keeping only the cheapest
    completions (ties within 1e-12) of each state.
    """

    @lru_cache(maxsize=None)
    def rec(rows: frozenset, cols: frozenset, ra: tuple, rb: tuple):
        if not rows or not cols:
            return 0.0, frozenset([()])
        best = np.inf
        tails: set = set()
        for i in rows:
            for j in cols:
                x = min(ra[i], rb[j])
                nra = ra[:i] + (ra[i] - x,) + ra[i + 1 :]
                nrb = rb[:j] + (rb[j] - x,) + rb[j + 1 :]
                if ra[i] <= rb[j]:
                    sub_cost, sub = rec(rows - {i}, cols, nra, nrb)
                else:
                    sub_cost, sub = rec(rows, cols - {j}, nra, nrb)
                cost = C[i, j] * x + sub_cost
                if cost < best - 1e-12:
                    best, tails = cost, set()
                if cost <= best + 1e-12:
                    tails.update(tuple(sorted(((i, j, x),) + t)) for t in sub)
        return best, frozenset(tails)

    n, m = a.size, b.size
    cost, cells = rec(frozenset(range(n)), frozenset(range(m)), tuple(a), tuple(b))
    plans = []
    for cs in cells:
        T = np.zeros((n, m))
        for i, j, x in cs:
            T[i, j] = x
        plans.append(T)
    return cost, plans


def exact_ot(C, a, b) -> tuple[float, TransportPlan]:
    """Exact transport LP by exhaustive vertex enumeration.

    Restricted to at most 5 support points per side.  Among optimal
    vertices (costs equal to 1e-12) the lexicographically smallest
    flattened plan is returned.
    """
    C = np.asarray(C, dtype=np.float64)
    if C.ndim != 2:
        raise ValueError("cost must be a matrix")
    n, m = C.shape
    if n > EXACT_OT_MAX_SUPPORT or m > EXACT_OT_MAX_SUPPORT:
        raise ValueError("oracle restricted to tiny instances")
    a = _as_weights(a, n)
    b = _as_weights(b, m)

    _, plans = _optimal_vertices(C, a, b)
    costs = [float(np.sum(T * C)) for T in plans]
    best_cost = min(costs)
    T = min(
        (T for T, c in zip(plans, costs) if c <= best_cost + 1e-12),
        key=lambda T: tuple(T.ravel()),
    )
    return float(np.sum(T * C)), TransportPlan(T, a, b, marginal_residual(T, a, b))
