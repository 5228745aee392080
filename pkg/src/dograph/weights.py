"""Domain-weight optimization over the probability simplex.

Four objectives over cluster mean gradients ``g_1..g_m`` (rows of ``means``):

* ``variance``: ``Var_{j~w}[||g_j||] + lam ||sum_j w_j g_j||^2``, projected
  gradient descent with restarts.
* ``robust_softmax``: closed form ``w = softmax(||g_j|| / tau)``.
* ``alignment``: fixed-point iteration ``w_j <- max(cos(g_j, g_bar), eps)``.
* ``uncertainty``: ``||sum_j w_j g_j||^2 + beta sum_j sigma_j^2 w_j``,
  away-step Frank-Wolfe with exact line search.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from itertools import product

import numpy as np
from sklearn.base import BaseEstimator

from .numerics import make_rng

KINDS = ("variance", "robust_softmax", "alignment", "uncertainty")


@dataclass
class SimplexWeights:
    w: np.ndarray
    objective: float = float("nan")
    status: str = "ok"
    iterations: int = 0
    gap: float = 0.0

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64)
        if self.w.ndim != 1 or self.w.size == 0:
            raise ValueError(f"weights must be a non-empty vector, got shape {self.w.shape}")
        if np.any(self.w < 0) or abs(self.w.sum() - 1.0) > 1e-9:
            raise ValueError(f"weights {self.w.tolist()} are not on the simplex")

    @property
    def m(self) -> int:
        return self.w.size

    def log_entry(self, epoch: int, kind: str) -> dict:
        return {"epoch": epoch, "kind": kind, "w": [float(x) for x in self.w],
                "objective_value": float(self.objective), "solver_status": self.status}


@dataclass(frozen=True)
class ObjectiveConfig:
    kind: str = "uncertainty"
    lam: float = 1.0
    tau: float = 1.0
    beta: float = 1.0
    max_iters: int = 500
    tol: float = 1e-8
    cosine_floor: float = 1e-6
    restarts: int = 5
    literal_variance: bool = False
    use_full_means: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"ObjectiveConfig.kind must be one of {KINDS}, got {self.kind!r}")
        for name in ("lam", "beta", "cosine_floor"):
            if getattr(self, name) < 0:
                raise ValueError(f"ObjectiveConfig.{name} must be >= 0")
        if not self.tau > 0:
            raise ValueError("ObjectiveConfig.tau must be > 0")
        if self.max_iters < 1 or not self.tol > 0:
            raise ValueError("ObjectiveConfig needs max_iters >= 1 and tol > 0")


def project_to_simplex(v) -> np.ndarray:
    """Euclidean projection onto the probability simplex (sort and threshold)."""
    v = np.asarray(v, dtype=np.float64)
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    ks = np.arange(1, v.size + 1)
    rho = np.flatnonzero(u - css / ks > 0)[-1]
    theta = css[rho] / (rho + 1)
    w = np.maximum(v - theta, 0.0)
    return w / w.sum()


def _as_means(means) -> np.ndarray:
    g = np.atleast_2d(np.asarray(means, dtype=np.float64))
    if g.shape[0] < 1:
        raise ValueError("need at least one mean gradient")
    return g


def variance_objective(w, means, lam: float = 1.0, literal: bool = False) -> float:
    g = _as_means(means)
    a = np.linalg.norm(g, axis=1)
    agg = w @ g
    if literal:
        spread = float(a.var())
    else:
        spread = float(w @ a**2 - (w @ a) ** 2)
    return spread + lam * float(agg @ agg)


def _pgd(w, grad_fn, obj_fn, step, tol, max_iters):
    f = obj_fn(w)
    for it in range(1, max_iters + 1):
        nxt = project_to_simplex(w - step * grad_fn(w))
        f_nxt = obj_fn(nxt)
        # backtrack when the curvature bound was too optimistic
        while f_nxt > f + 1e-15 * max(1.0, abs(f)) and step > 1e-30:
            step *= 0.5
            nxt = project_to_simplex(w - step * grad_fn(w))
            f_nxt = obj_fn(nxt)
        delta = float(np.max(np.abs(nxt - w)))
        w, f = nxt, f_nxt
        if delta < tol:
            return w, f, it, True
    return w, f, max_iters, False


def solve_variance(means, cfg: ObjectiveConfig = ObjectiveConfig(kind="variance")) -> SimplexWeights:
    """Projected gradient descent on the variance objective.

    The w-weighted variance is indefinite in general, so the solver runs from
    the uniform point, every vertex, and ``cfg.restarts`` random interior
    points, keeping the best. Ties go to the earliest start (uniform first).
    """
    g = _as_means(means)
    m = g.shape[0]
    if m == 1:
        return SimplexWeights(np.ones(1), variance_objective(np.ones(1), g, cfg.lam,
                                                               cfg.literal_variance))
    a = np.linalg.norm(g, axis=1)
    gram = g @ g.T
    lam = cfg.lam

    if cfg.literal_variance:
        def grad(w):
            return 2.0 * lam * gram @ w
    else:
        def grad(w):
            return a**2 - 2.0 * (w @ a) * a + 2.0 * lam * gram @ w

    def obj(w):
        return variance_objective(w, g, lam, cfg.literal_variance)

    curvature = 2.0 * (lam * np.linalg.eigvalsh(gram)[-1] + a @ a)
    step = 1.0 / curvature if curvature > 0 else 1.0
    rng = make_rng(cfg.seed, 7)
    starts = [np.full(m, 1.0 / m)] + list(np.eye(m)) + list(rng.dirichlet(np.ones(m), cfg.restarts))
    best = None
    for w0 in starts:
        w, f, it, ok = _pgd(w0, grad, obj, step, cfg.tol, cfg.max_iters)
        if best is None or f < best[1] - 1e-12 * max(1.0, abs(best[1])):
            best = (w, f, it, ok)
    w, f, it, ok = best
    return SimplexWeights(w, f, "converged" if ok else "max_iters", it)


def robust_softmax_objective(means, tau: float = 1.0) -> float:
    z = np.linalg.norm(_as_means(means), axis=1) / tau
    zmax = z.max()
    return float(tau * (zmax + np.log(np.exp(z - zmax).sum())))


def softmax_weights(norms, tau: float) -> np.ndarray:
    z = np.asarray(norms, dtype=np.float64) / tau
    e = np.exp(z - z.max())
    return e / e.sum()


def solve_robust_softmax(means, cfg: ObjectiveConfig = ObjectiveConfig(kind="robust_softmax")) -> SimplexWeights:
    g = _as_means(means)
    w = softmax_weights(np.linalg.norm(g, axis=1), cfg.tau)
    return SimplexWeights(w, robust_softmax_objective(g, cfg.tau), "closed_form")


def _cosines(g: np.ndarray, norms: np.ndarray, w: np.ndarray) -> np.ndarray | None:
    agg = w @ g
    agg_norm = np.linalg.norm(agg)
    if agg_norm == 0.0:
        return None
    return (g @ agg) / (norms * agg_norm)


def alignment_update(w, means, cosine_floor: float = 1e-6) -> np.ndarray | None:
    """One fixed-point step on the eligible (non-zero) means; None if degenerate."""
    g = _as_means(means)
    cos = _cosines(g, np.linalg.norm(g, axis=1), w)
    if cos is None or np.all(cos <= 0):
        return None
    nxt = np.maximum(cos, cosine_floor)
    return nxt / nxt.sum()


def alignment_objective(w, means) -> float:
    g = _as_means(means)
    norms = np.linalg.norm(g, axis=1)
    keep = norms > 0
    cos = _cosines(g[keep], norms[keep], w[keep])
    return 0.0 if cos is None else float(-(w[keep] @ cos))


def solve_alignment(means, cfg: ObjectiveConfig = ObjectiveConfig(kind="alignment")) -> SimplexWeights:
    """Fixed-point iteration from uniform; zero-norm means get weight 0.

    Status is ``converged``, ``max_iters`` (returned iterate is the last one),
    or ``fallback_uniform`` when every cosine at some iterate is non-positive.
    """
    g = _as_means(means)
    m = g.shape[0]
    norms = np.linalg.norm(g, axis=1)
    keep = np.flatnonzero(norms > 0)
    if keep.size == 0:
        return SimplexWeights(np.full(m, 1.0 / m), 0.0, "fallback_uniform")
    sub = g[keep]
    w = np.full(keep.size, 1.0 / keep.size)
    status, it = "max_iters", cfg.max_iters
    for i in range(1, cfg.max_iters + 1):
        nxt = alignment_update(w, sub, cfg.cosine_floor)
        if nxt is None:
            w, status, it = np.full(keep.size, 1.0 / keep.size), "fallback_uniform", i
            break
        delta = float(np.max(np.abs(nxt - w)))
        w = nxt
        if delta < cfg.tol:
            status, it = "converged", i
            break
    full = np.zeros(m)
    full[keep] = w
    return SimplexWeights(full, alignment_objective(full, g), status, it)


def uncertainty_objective(w, means, sigmas, beta: float = 1.0) -> float:
    agg = w @ _as_means(means)
    return float(agg @ agg + beta * (np.asarray(sigmas) @ w))


def solve_uncertainty(means, sigmas, cfg: ObjectiveConfig = ObjectiveConfig()) -> SimplexWeights:
    """Away-step Frank-Wolfe with exact line search on the convex quadratic.

    The Frank-Wolfe duality gap is evaluated every iteration; the solver
    returns as soon as it drops to ``cfg.tol``.
    """
    g = _as_means(means)
    m = g.shape[0]
    sig = np.asarray(sigmas, dtype=np.float64)
    if sig.shape != (m,) or np.any(sig < 0):
        raise ValueError(f"sigmas must be {m} non-negative values")
    lin = cfg.beta * sig
    gram = g @ g.T
    w = np.full(m, 1.0 / m)
    gap, status, it = np.inf, "max_iters", cfg.max_iters
    for i in range(cfg.max_iters + 1):
        grad = 2.0 * gram @ w + lin
        s = int(np.argmin(grad))
        gap = float(grad @ w - grad[s])
        if gap <= cfg.tol:
            status, it = "converged", i
            break
        if i == cfg.max_iters:
            break
        active = np.flatnonzero(w > 0)
        v = int(active[np.argmax(grad[active])])
        away_gap = float(grad[v] - grad @ w)
        if gap >= away_gap:
            d = -w.copy()
            d[s] += 1.0
            gmax = 1.0
        else:
            d = w.copy()
            d[v] -= 1.0
            gmax = w[v] / (1.0 - w[v]) if w[v] < 1.0 else np.inf
        curv = float(d @ gram @ d)
        slope = float(grad @ d)
        gamma = gmax if curv <= 0 else min(gmax, -slope / (2.0 * curv))
        w = np.maximum(w + gamma * d, 0.0)
        w /= w.sum()
    return SimplexWeights(w, uncertainty_objective(w, g, sig, cfg.beta), status, it, gap)


def simplex_grid(m: int, step: float):
    """Yield every point of the simplex grid with spacing ``step``."""
    n = int(round(1.0 / step))
    for head in product(range(n + 1), repeat=m - 1):
        rest = n - sum(head)
        if rest >= 0:
            yield np.array(head + (rest,), dtype=np.float64) / n


def grid_minimum(objective, m: int, step: float = 1e-2) -> tuple[np.ndarray, float]:
    """Brute-force minimum of ``objective`` over the simplex grid."""
    best_w, best_f = None, np.inf
    for w in simplex_grid(m, step):
        f = objective(w)
        if f < best_f:
            best_w, best_f = w, f
    return best_w, best_f


def _solve(kind: str, means, sigmas, cfg: ObjectiveConfig) -> SimplexWeights:
    if kind == "variance":
        return solve_variance(means, cfg)
    if kind == "robust_softmax":
        return solve_robust_softmax(means, cfg)
    if kind == "alignment":
        return solve_alignment(means, cfg)
    return solve_uncertainty(means, sigmas, cfg)


def optimize_weights(partition, cfg: ObjectiveConfig = ObjectiveConfig()) -> SimplexWeights:
    """Solve for cluster weights on a :class:`~dograph.partition.DomainPartition`.

    Uses the projected centroids (or the full-dimension means when
    ``cfg.use_full_means``). Empty clusters are left out of the solve and
    get weight 0.
    """
    means = partition.full_means if cfg.use_full_means else partition.projected_centroids
    sizes = np.asarray(partition.sizes)
    live = np.flatnonzero(sizes > 0)
    if live.size == 0:
        raise ValueError("partition has no non-empty clusters")
    res = _solve(cfg.kind, means[live], np.asarray(partition.intra_variance)[live], cfg)
    w = np.zeros(len(sizes))
    w[live] = res.w
    return SimplexWeights(w, res.objective, res.status, res.iterations, res.gap)


class DomainWeightOptimizer(BaseEstimator):
    """Estimator front end for the simplex weight solvers.

    ``fit(means, sigmas)`` stores the solution in ``weights_`` (the full
    :class:`SimplexWeights` result is in ``result_``).
    """

    def __init__(self, kind: str = "uncertainty", lam: float = 1.0, tau: float = 1.0,
                 beta: float = 1.0, max_iters: int = 500, tol: float = 1e-8,
                 cosine_floor: float = 1e-6):
        self.kind = kind
        self.lam = lam
        self.tau = tau
        self.beta = beta
        self.max_iters = max_iters
        self.tol = tol
        self.cosine_floor = cosine_floor

    def _config(self) -> ObjectiveConfig:
        return ObjectiveConfig(**self.get_params())

    def fit(self, means, sigmas=None):
        means = _as_means(means)
        if sigmas is None:
            sigmas = np.zeros(means.shape[0])
        self.result_ = _solve(self.kind, means, sigmas, self._config())
        self.weights_ = self.result_.w
        self.objective_ = self.result_.objective
        self.status_ = self.result_.status
        return self


def weights_log_line(epoch: int, kind: str, weights: SimplexWeights) -> str:
    return json.dumps(weights.log_entry(epoch, kind), sort_keys=True)


def objective_config_dict(cfg: ObjectiveConfig) -> dict:
    return asdict(cfg)
