import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dograph.numerics import (NonFiniteError, gaussian_matrix, make_rng, matmul, pca_2d,
                              row_log_softmax, row_softmax)


def naive_matmul(a, b):
    out = [[0.0] * len(b[0]) for _ in range(len(a))]
    for i in range(len(a)):
        for j in range(len(b[0])):
            s = 0.0
            for k in range(len(b)):
                s += a[i][k] * b[k][j]
            out[i][j] = s
    return np.array(out)


def test_matmul_identity():
    m = make_rng(1).standard_normal((2, 3))
    np.testing.assert_array_equal(matmul(np.eye(2), m), m)


def test_matmul_hand_sum():
    np.testing.assert_array_equal(matmul([[1, 2], [3, 4]], [[1], [1]]), [[3], [7]])


def test_matmul_matches_triple_loop():
    # integer-valued entries make every partial sum exact, so any summation order agrees
    rng = make_rng(2)
    a = rng.integers(-50, 50, (5, 7)).astype(float)
    b = rng.integers(-50, 50, (7, 3)).astype(float)
    np.testing.assert_array_equal(matmul(a, b), naive_matmul(a.tolist(), b.tolist()))


def test_matmul_float_close_to_triple_loop():
    rng = make_rng(3)
    a, b = rng.standard_normal((5, 7)), rng.standard_normal((7, 3))
    np.testing.assert_allclose(matmul(a, b), naive_matmul(a.tolist(), b.tolist()), rtol=0,
                               atol=1e-14)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ValueError, match=r"\(2, 3\).*\(2, 3\)"):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_matmul_rejects_non_finite():
    with pytest.raises(NonFiniteError):
        matmul([[np.nan]], [[1.0]])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_matmul_associativity(seed):
    rng = make_rng(seed)
    a, b, c = rng.standard_normal((4, 5)), rng.standard_normal((5, 6)), rng.standard_normal((6, 3))
    scale = np.abs(a).max() * np.abs(b).max() * np.abs(c).max() * 30
    assert np.max(np.abs(matmul(matmul(a, b), c) - matmul(a, matmul(b, c)))) <= 1e-9 * scale


def test_softmax_examples():
    np.testing.assert_allclose(row_softmax([[0.0, 0.0, 0.0]]), [[1 / 3] * 3], atol=1e-15)
    np.testing.assert_allclose(row_softmax([[np.log(1.0), np.log(3.0)]]), [[0.25, 0.75]],
                               atol=1e-15)
    out = row_softmax([[1000.0, 1000.0]])
    np.testing.assert_array_equal(out, [[0.5, 0.5]])


@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 8)),
              elements=st.floats(-1e300, 1e300)))
def test_softmax_rows_are_probability_vectors(z):
    p = row_softmax(z)
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, rtol=0, atol=1e-12)


def test_log_softmax_consistent():
    z = make_rng(4).standard_normal((3, 6)) * 10
    np.testing.assert_allclose(np.exp(row_log_softmax(z)), row_softmax(z), atol=1e-15)


def test_gaussian_statistics():
    var = 0.25
    x = gaussian_matrix(make_rng(5), 1000, 1000, var)
    sigma = np.sqrt(var / x.size)
    assert abs(x.mean()) < 4 * sigma
    assert abs(x.var() / var - 1) < 0.02


def test_gaussian_deterministic():
    np.testing.assert_array_equal(gaussian_matrix(make_rng(9), 3, 4, 1.0),
                                  gaussian_matrix(make_rng(9), 3, 4, 1.0))


@pytest.mark.parametrize("rows,cols,var", [(0, 3, 1.0), (3, 0, 1.0), (2, 2, 0.0), (2, 2, -1.0)])
def test_gaussian_rejects_bad_args(rows, cols, var):
    with pytest.raises(ValueError):
        gaussian_matrix(make_rng(0), rows, cols, var)


@given(st.integers(0, 2**63 - 1), st.lists(st.integers(0, 10), max_size=3))
@settings(max_examples=30)
def test_rng_streams_reproducible(seed, keys):
    assert np.array_equal(make_rng(seed, *keys).random(8), make_rng(seed, *keys).random(8))


def test_rng_child_streams_differ():
    assert not np.array_equal(make_rng(0, 1).random(4), make_rng(0, 2).random(4))
    assert not np.array_equal(make_rng(0).random(4), make_rng(0, 1).random(4))


def test_pca_plane_recovery_preserves_distances():
    rng = make_rng(6)
    coeffs = rng.standard_normal((30, 2)) * [3.0, 1.0]
    basis, _ = np.linalg.qr(rng.standard_normal((5, 2)))
    pts = coeffs @ basis.T + rng.standard_normal(5)
    out = pca_2d(pts)
    d_in = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
    d_out = np.linalg.norm(out[:, None] - out[None], axis=-1)
    assert np.max(np.abs(d_in - d_out)) < 1e-8


def test_pca_first_axis_matches_max_variance_axis():
    rng = make_rng(7)
    stds = np.array([1.0, 5.0, 0.5, 2.0])
    pts = rng.standard_normal((4000, 4)) * stds
    centred = pts - pts.mean(axis=0)
    out = pca_2d(pts)
    # recover the loading vector by regressing the first output column on the inputs
    v = np.linalg.lstsq(centred, out[:, 0], rcond=None)[0]
    v /= np.linalg.norm(v)
    # oracle: eigenvectors of the sample covariance, from the closed-form symmetric solver
    w, vecs = np.linalg.eigh(np.cov(centred.T))
    top = vecs[:, -1]
    angle = np.arccos(min(1.0, abs(v @ top)))
    assert angle < 1e-3
    assert np.argmax(np.abs(v)) == 1
    assert v[1] > 0


def test_pca_centred():
    out = pca_2d(make_rng(8).standard_normal((50, 6)) + 100)
    np.testing.assert_allclose(out.mean(axis=0), 0.0, atol=1e-10)


def test_pca_errors():
    with pytest.raises(ValueError):
        pca_2d(np.ones((5, 3)))
    with pytest.raises(ValueError):
        pca_2d(np.ones((1, 3)))
    with pytest.raises(ValueError):
        pca_2d(np.ones((4, 1)))
