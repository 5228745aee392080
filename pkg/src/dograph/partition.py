"""Model-centric domain discovery by k-means on projected per-sample gradients."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, ClusterMixin
from sklearn.metrics import silhouette_score
from sklearn.utils.validation import check_array, check_is_fitted

from .geometry import Projector, project
from .numerics import make_rng, pca_2d

DEFAULT_M = 11


def _sq_dists(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    d = (np.einsum("ij,ij->i", points, points)[:, None]
         - 2.0 * points @ centroids.T
         + np.einsum("ij,ij->i", centroids, centroids)[None, :])
    return np.maximum(d, 0.0)


def _inertia(points: np.ndarray, centroids: np.ndarray, labels: np.ndarray) -> float:
    # explicit differences, so coincident points contribute exactly zero
    return float(np.sum((points - centroids[labels]) ** 2))


def kmeans_plusplus(points: np.ndarray, m: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    idx = [int(rng.integers(n))]
    closest = _sq_dists(points, points[idx])[:, 0]
    for _ in range(1, m):
        total = closest.sum()
        if total > 0:
            nxt = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
            nxt = min(nxt, n - 1)
        else:
            nxt = int(rng.integers(n))
        idx.append(nxt)
        closest = np.minimum(closest, _sq_dists(points, points[nxt:nxt + 1])[:, 0])
    return points[idx].copy()


def _reseed_empty(points, centroids, labels, dists):
    counts = np.bincount(labels, minlength=len(centroids))
    empty = np.flatnonzero(counts == 0)
    if empty.size == 0:
        return centroids
    own = dists[np.arange(len(points)), labels]
    order = np.argsort(-own, kind="stable")
    centroids = centroids.copy()
    for j, i in zip(empty, order):
        centroids[j] = points[i]
    return centroids


def kmeans(points, m: int, rng: np.random.Generator, max_iters: int = 100,
           tol: float = 1e-10) -> tuple[np.ndarray, np.ndarray, list[float]]:
    """Lloyd's algorithm with k-means++ seeding.

    Empty clusters are moved onto the points farthest from their current
    centroids. Stops when the largest centroid shift is below ``tol`` or
    after ``max_iters`` rounds.

    Returns
    -------
    assignments : ndarray of shape (n_points,)
    centroids : ndarray of shape (m, dim)
    inertia_history : list of float
        Inertia after each assignment step; non-increasing.
    """
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if n == 0:
        raise ValueError("kmeans needs at least one point")
    if not 1 <= m <= n:
        raise ValueError(f"kmeans: m={m} must lie in [1, n_points={n}]")
    centroids = kmeans_plusplus(points, m, rng)
    history: list[float] = []
    for _ in range(max_iters):
        dists = _sq_dists(points, centroids)
        labels = np.argmin(dists, axis=1)
        inertia = _inertia(points, centroids, labels)
        if history and inertia > history[-1] * (1 + 1e-9) + 1e-12:
            raise RuntimeError(f"kmeans inertia increased: {history[-1]} -> {inertia}")
        history.append(inertia)
        new = centroids.copy()
        for j in range(m):
            members = labels == j
            if members.any():
                new[j] = points[members].mean(axis=0)
        new = _reseed_empty(points, new, labels, dists)
        shift = float(np.max(np.linalg.norm(new - centroids, axis=1)))
        centroids = new
        if shift < tol:
            break
    dists = _sq_dists(points, centroids)
    labels = np.argmin(dists, axis=1)
    final = _inertia(points, centroids, labels)
    if final < history[-1]:
        history.append(final)
    return labels, centroids, history


class GradientKMeans(ClusterMixin, BaseEstimator):
    """k-means over gradient vectors with a seeded k-means++ start.

    Parameters
    ----------
    n_clusters : int, default=11
    seed : int, default=0
    max_iter : int, default=100
    tol : float, default=1e-10
    """

    def __init__(self, n_clusters: int = DEFAULT_M, seed: int = 0, max_iter: int = 100,
                 tol: float = 1e-10):
        self.n_clusters = n_clusters
        self.seed = seed
        self.max_iter = max_iter
        self.tol = tol

    def fit(self, X, y=None):
        X = check_array(X)
        labels, centers, hist = kmeans(X, self.n_clusters, make_rng(self.seed),
                                       self.max_iter, self.tol)
        self.labels_ = labels
        self.cluster_centers_ = centers
        self.inertia_history_ = hist
        self.inertia_ = hist[-1]
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "cluster_centers_")
        X = check_array(X)
        return np.argmin(_sq_dists(X, self.cluster_centers_), axis=1)


@dataclass
class DomainPartition:
    assignments: np.ndarray
    projected_centroids: np.ndarray
    full_means: np.ndarray
    sizes: np.ndarray
    intra_variance: np.ndarray
    projected: np.ndarray | None = None

    @property
    def m(self) -> int:
        return len(self.sizes)


def _flat_matrix(records) -> np.ndarray:
    if isinstance(records, np.ndarray):
        return np.atleast_2d(records).astype(np.float64, copy=False)
    return np.stack([r.flat for r in records])


def _intra_variance(vectors: np.ndarray, mean: np.ndarray) -> float:
    sq = np.sum((vectors - mean) ** 2, axis=1)
    return float(sq.var()) if sq.size else 0.0


def build_partition(records, projector: Projector, m: int, rng: np.random.Generator,
                    max_iters: int = 100, tol: float = 1e-10,
                    variance_space: str = "projected") -> DomainPartition:
    """Project flat gradients, cluster them and summarize each cluster.

    ``records`` is a list of :class:`GradientRecord` or a ``(B, D)`` array of
    flat gradients. ``intra_variance[j]`` is the variance, over members of
    cluster ``j``, of the squared distance to the cluster mean, taken in
    projected space by default (``variance_space="full"`` for the original
    gradients).
    """
    G = _flat_matrix(records)
    if G.shape[0] == 0:
        raise ValueError("build_partition needs at least one record")
    if variance_space not in ("projected", "full"):
        raise ValueError(f"variance_space must be 'projected' or 'full', got {variance_space!r}")
    P = project(projector, G)
    labels, _, _ = kmeans(P, m, rng, max_iters, tol)
    sizes = np.bincount(labels, minlength=m)
    cents = np.zeros((m, P.shape[1]))
    means = np.zeros((m, G.shape[1]))
    var = np.zeros(m)
    for j in range(m):
        members = labels == j
        if not members.any():
            continue
        cents[j] = P[members].mean(axis=0)
        means[j] = G[members].mean(axis=0)
        if variance_space == "projected":
            var[j] = _intra_variance(P[members], cents[j])
        else:
            var[j] = _intra_variance(G[members], means[j])
    return DomainPartition(labels, cents, means, sizes, var, P)


def label_separation(projections, human_labels) -> float:
    """Silhouette of the human domain labels on projected gradients, in [-1, 1]."""
    if isinstance(projections, DomainPartition):
        projections = projections.projected
    X = np.asarray(projections, dtype=np.float64)
    labels = np.asarray(human_labels)
    n_labels = np.unique(labels).size
    if n_labels < 2:
        raise ValueError("label_separation needs at least two distinct labels")
    if n_labels >= X.shape[0]:
        raise ValueError("label_separation needs fewer labels than points")
    return float(silhouette_score(X, labels, metric="euclidean"))


def export_partition_csv(path, partition: DomainPartition, human_labels) -> None:
    """CSV of ``sample_index, human_domain, cluster, proj_coord_1, proj_coord_2``."""
    coords = pca_2d(partition.projected)
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_index", "human_domain", "cluster", "proj_coord_1", "proj_coord_2"])
        for i, (h, c, xy) in enumerate(zip(human_labels, partition.assignments, coords)):
            w.writerow([i, int(h), int(c), repr(float(xy[0])), repr(float(xy[1]))])
