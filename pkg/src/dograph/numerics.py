"""Dense float64 linear algebra and seeded randomness shared by all modules.

Matrices are plain ``numpy.ndarray`` objects of dtype float64. Random streams
come from numpy's Philox generator, a counter-based bit generator whose output
for a given key is fixed across platforms and numpy releases.
"""

from __future__ import annotations

import numpy as np

PCA_TOL = 1e-10
PCA_MAX_ITER = 1000


class NonFiniteError(FloatingPointError):
    """Raised when a computation produces NaN or Inf."""


def make_rng(seed, *keys) -> np.random.Generator:
    """Return a Philox generator for ``seed``, optionally on a derived child stream.

    ``keys`` are non-negative integers appended to the seed sequence's spawn
    key, so ``make_rng(s, 1)`` and ``make_rng(s, 2)`` are independent streams
    that never overlap with ``make_rng(s)``.
    """
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.Philox(ss))


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name} contains non-finite entries")
    return arr


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"cannot multiply shapes {a.shape} and {b.shape}")
    out = a @ b
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"product of {a.shape} and {b.shape} overflowed")
    return out


def row_softmax(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def row_log_softmax(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def gaussian_matrix(rng: np.random.Generator, rows: int, cols: int,
                    variance: float = 1.0) -> np.ndarray:
    if rows < 1 or cols < 1:
        raise ValueError(f"gaussian_matrix needs positive shape, got ({rows}, {cols})")
    if not variance > 0:
        raise ValueError(f"variance must be positive, got {variance}")
    return rng.normal(0.0, np.sqrt(variance), size=(rows, cols))


def _top_eigvec(cov: np.ndarray, start: np.ndarray) -> tuple[np.ndarray, float]:
    v = start / np.linalg.norm(start)
    lam = 0.0
    for _ in range(PCA_MAX_ITER):
        w = cov @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return v, 0.0
        w /= norm
        # sign-insensitive convergence test
        delta = min(np.linalg.norm(w - v), np.linalg.norm(w + v))
        v = w
        lam = norm
        if delta < PCA_TOL:
            break
    return v, float(v @ cov @ v) if lam else 0.0


def pca_2d(points) -> np.ndarray:
    """Project points onto their top two principal components.

    Power iteration with deflation on the covariance of the mean-centred
    points. Each component's sign is chosen so that its largest-magnitude
    loading is positive, which makes the output reproducible.

    Parameters
    ----------
    points : array of shape (n_points, n_dims)
        Needs at least two points and two dimensions.

    Returns
    -------
    ndarray of shape (n_points, 2)
    """
    x = as_matrix(points, "points")
    n, p = x.shape
    if n < 2 or p < 2:
        raise ValueError(f"pca_2d needs >= 2 points and >= 2 dims, got {x.shape}")
    centred = x - x.mean(axis=0)
    if not np.any(centred):
        raise ValueError("pca_2d: all points are identical")
    cov = centred.T @ centred / (n - 1)
    start_rng = make_rng(0)
    components = []
    for _ in range(2):
        v, lam = _top_eigvec(cov, start_rng.standard_normal(p))
        for c in components:
            v = v - (v @ c) * c
        v /= np.linalg.norm(v)
        if v[np.argmax(np.abs(v))] < 0:
            v = -v
        components.append(v)
        cov = cov - lam * np.outer(v, v)
    basis = np.stack(components, axis=1)
    proj = centred @ basis
    return proj - proj.mean(axis=0)
