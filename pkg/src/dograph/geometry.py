"""Gradient-space geometry: Gaussian random projection, gradient kernel, MMD."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from itertools import combinations
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .model import BLOCKS, GradientRecord
from .numerics import gaussian_matrix, make_rng

DEFAULT_TARGET_DIM = 512
LARGE_SCALE_TARGET_DIM = 5000
IDENTITY_TOL = 1e-9

_DUMP_HEADER = struct.Struct("<qq8s")


@dataclass(frozen=True)
class ProjectionConfig:
    input_dim: int
    target_dim: int = DEFAULT_TARGET_DIM
    seed: int = 0
    epsilon: float = 0.3

    def __post_init__(self):
        if not 1 <= self.target_dim <= self.input_dim:
            raise ValueError(f"target_dim must lie in [1, input_dim={self.input_dim}], "
                             f"got {self.target_dim}")
        if not 0 < self.epsilon < 1:
            raise ValueError(f"epsilon must lie in (0, 1), got {self.epsilon}")


class Projector(TransformerMixin, BaseEstimator):
    """Dense Gaussian random projection ``g -> R^T g`` with ``R_pq ~ N(0, 1/k)``.

    Parameters
    ----------
    target_dim : int
        Output dimension ``k``. Clipped to the input dimension on ``fit``.
    seed : int
        Seed of the Philox stream that generates ``R``; the same seed and
        input dimension always regenerate the same matrix.

    Attributes
    ----------
    components_ : ndarray of shape (n_features_in_, k)
        The projection matrix ``R``.
    """

    def __init__(self, target_dim: int = DEFAULT_TARGET_DIM, seed: int = 0):
        self.target_dim = target_dim
        self.seed = seed

    def fit(self, X, y=None):
        X = check_array(X, ensure_min_samples=1)
        return self._build(X.shape[1])

    def fit_dim(self, input_dim: int):
        """Fit from a known input dimension, without data."""
        return self._build(int(input_dim))

    def _build(self, d: int):
        k = min(self.target_dim, d)
        self.config_ = ProjectionConfig(d, k, self.seed)
        self.components_ = gaussian_matrix(make_rng(self.seed), d, k, 1.0 / k)
        self.n_features_in_ = d
        return self

    def transform(self, X):
        check_is_fitted(self, "components_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        return X @ self.components_

    @classmethod
    def from_config(cls, config: ProjectionConfig) -> "Projector":
        proj = cls(config.target_dim, config.seed)
        proj.config_ = config
        proj.components_ = gaussian_matrix(make_rng(config.seed), config.input_dim,
                                           config.target_dim, 1.0 / config.target_dim)
        proj.n_features_in_ = config.input_dim
        return proj


def project(p: Projector, g) -> np.ndarray:
    g = np.asarray(g, dtype=np.float64)
    check_is_fitted(p, "components_")
    if g.shape[-1] != p.n_features_in_:
        raise ValueError(f"gradient has length {g.shape[-1]}, projector expects {p.n_features_in_}")
    return g @ p.components_


def pairwise_sq_dists(points: np.ndarray) -> np.ndarray:
    """Squared distances for all pairs ``i < j``, in ``combinations`` order."""
    sq = np.einsum("ij,ij->i", points, points)
    gram = points @ points.T
    iu = np.triu_indices(points.shape[0], k=1)
    return np.maximum(sq[iu[0]] + sq[iu[1]] - 2.0 * gram[iu], 0.0)


def jl_preserved_fraction(points: np.ndarray, projected: np.ndarray, epsilon: float) -> float:
    """Fraction of pairs whose squared distance survives within ``1 +/- epsilon``.

    Original-space distances are taken from explicit differences, so the
    check does not share arithmetic with the projected side.
    """
    n = points.shape[0]
    orig = np.array([np.sum((points[i] - points[j]) ** 2) for i, j in combinations(range(n), 2)])
    proj = pairwise_sq_dists(projected)
    ratio = proj / orig
    return float(np.mean((ratio >= 1 - epsilon) & (ratio <= 1 + epsilon)))


def jl_check(d: int = 10_000, k: int = 1_000, n_points: int = 100,
             epsilon: float = 0.3, seed: int = 0) -> float:
    """Project ``n_points`` random Gaussian vectors and return the preserved fraction."""
    points = make_rng(seed, 1).standard_normal((n_points, d))
    proj = Projector(k, seed).fit_dim(d)
    return jl_preserved_fraction(points, project(proj, points), epsilon)


def _block_matrix(samples, block: str) -> np.ndarray:
    if block != "flat" and block not in BLOCKS:
        raise ValueError(f"unknown block {block!r}; expected one of {BLOCKS + ('flat',)}")
    return np.stack([np.ravel(s.block(block)) for s in samples])


def gradient_kernel(g_a: GradientRecord, g_b: GradientRecord, block: str = "flat") -> float:
    a = np.ravel(g_a.block(block))
    b = np.ravel(g_b.block(block))
    if a.shape != b.shape:
        raise ValueError(f"gradient shapes differ: {a.shape} vs {b.shape}")
    return float(a @ b)


def mmd_squared(samples_1, samples_2, block: str = "flat", unbiased: bool = False) -> float:
    """Empirical MMD^2 under the gradient kernel of ``block``.

    The default biased V-statistic keeps the ``i == j`` terms; it is the
    estimator that equals the squared distance between empirical mean
    gradients. ``unbiased=True`` drops the diagonals (U-statistic) and needs
    at least two samples per side.
    """
    if len(samples_1) == 0 or len(samples_2) == 0:
        raise ValueError("mmd_squared needs two non-empty sample lists")
    a = _block_matrix(samples_1, block)
    b = _block_matrix(samples_2, block)
    k11, k22, k12 = a @ a.T, b @ b.T, a @ b.T
    n1, n2 = len(a), len(b)
    if unbiased:
        if n1 < 2 or n2 < 2:
            raise ValueError("unbiased MMD needs at least 2 samples per side")
        t11 = (k11.sum() - np.trace(k11)) / (n1 * (n1 - 1))
        t22 = (k22.sum() - np.trace(k22)) / (n2 * (n2 - 1))
    else:
        t11 = k11.sum() / n1**2
        t22 = k22.sum() / n2**2
    return float(t11 + t22 - 2.0 * k12.sum() / (n1 * n2))


@dataclass
class TheoremReport:
    block: str
    lhs: float
    rhs: float
    rel_discrepancy: float

    @property
    def passed(self) -> bool:
        return self.rel_discrepancy <= IDENTITY_TOL

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def verify_theorem(samples_1, samples_2, block: str = "flat") -> TheoremReport:
    """Compare ``||mean g(P1) - mean g(P2)||^2`` against the V-statistic MMD^2.

    Both sides below ``1e-12`` times the kernel scale count as an exact
    zero, since the relative discrepancy is meaningless there.
    """
    rhs = mmd_squared(samples_1, samples_2, block)
    a = _block_matrix(samples_1, block)
    b = _block_matrix(samples_2, block)
    diff = a.mean(axis=0) - b.mean(axis=0)
    lhs = float(diff @ diff)
    scale = max(np.mean(np.einsum("ij,ij->i", a, a)), np.mean(np.einsum("ij,ij->i", b, b)))
    denom = max(abs(lhs), abs(rhs))
    if denom <= 1e-12 * scale:
        rel = 0.0
    else:
        rel = abs(lhs - rhs) / denom
    return TheoremReport(block, lhs, max(rhs, 0.0) if rhs > -1e-10 else rhs, float(rel))


@dataclass
class GramMatrix:
    values: np.ndarray
    block: str

    def eigenvalues(self) -> np.ndarray:
        return np.linalg.eigvalsh(self.values)

    def is_psd(self, rel_tol: float = 1e-8) -> bool:
        ev = self.eigenvalues()
        return bool(ev.min() >= -rel_tol * max(ev.max(), 0.0))


def gram_matrix(samples, block: str = "flat") -> GramMatrix:
    if len(samples) == 0:
        raise ValueError("gram_matrix needs at least one sample")
    a = _block_matrix(samples, block)
    g = a @ a.T
    return GramMatrix(0.5 * (g + g.T), block)


def write_gradient_dump(path, vectors: np.ndarray, tag: str = "flat") -> None:
    """Binary dump: int64 count, int64 dim, 8-byte ASCII tag, then float64 rows."""
    vectors = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
    raw_tag = tag.encode("ascii")
    if len(raw_tag) > 8:
        raise ValueError(f"tag {tag!r} longer than 8 bytes")
    with open(Path(path), "wb") as fh:
        fh.write(_DUMP_HEADER.pack(vectors.shape[0], vectors.shape[1], raw_tag.ljust(8, b"\0")))
        fh.write(vectors.astype("<f8").tobytes())


def read_gradient_dump(path) -> tuple[np.ndarray, str]:
    raw = Path(path).read_bytes()
    n, d, tag = _DUMP_HEADER.unpack_from(raw)
    body = np.frombuffer(raw, dtype="<f8", offset=_DUMP_HEADER.size)
    if body.size != n * d:
        raise ValueError(f"{path}: expected {n}x{d} floats, found {body.size}")
    return body.reshape(n, d).astype(np.float64), tag.rstrip(b"\0").decode("ascii")
