import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.base import clone

from dograph.geometry import (ProjectionConfig, Projector, gradient_kernel, gram_matrix,
                              jl_check, jl_preserved_fraction, mmd_squared, project,
                              read_gradient_dump, verify_theorem, write_gradient_dump)
from dograph.model import BLOCKS, GradientRecord, ModelConfig, batch_records, init_state
from dograph.numerics import make_rng

from conftest import random_sample

CFG = ModelConfig(vocab_size=6, seq_len=4, embed_dim=3, qk_dim=2, v_dim=3, hidden_dim=3,
                  attn_temperature=0.5)


def records(count, seed, state_seed=0):
    rng = make_rng(seed)
    state = init_state(CFG, make_rng(state_seed))
    return batch_records(CFG, state, [random_sample(CFG, rng) for _ in range(count)])


def flat_record(vec):
    return GradientRecord.from_flat(CFG, np.asarray(vec, dtype=float))


def unit(i):
    e = np.zeros(CFG.n_params)
    e[i] = 1.0
    return flat_record(e)


def test_projection_config_validation():
    with pytest.raises(ValueError):
        ProjectionConfig(10, 11)
    with pytest.raises(ValueError):
        ProjectionConfig(10, 0)
    with pytest.raises(ValueError):
        ProjectionConfig(10, 5, epsilon=1.0)


def test_projector_shape_and_regeneration():
    p = Projector(7, seed=3).fit_dim(20)
    assert p.components_.shape == (20, 7)
    q = Projector.from_config(ProjectionConfig(20, 7, 3))
    np.testing.assert_array_equal(p.components_, q.components_)
    assert clone(p).get_params() == {"target_dim": 7, "seed": 3}


def test_projector_entry_variance():
    p = Projector(400, seed=1).fit_dim(2000)
    assert abs(p.components_.var() * 400 - 1) < 0.01


def test_project_linearity_and_zero():
    p = Projector(8, seed=0).fit_dim(30)
    rng = make_rng(1)
    g1, g2 = rng.standard_normal((2, 30))
    np.testing.assert_array_equal(project(p, np.zeros(30)), np.zeros(8))
    np.testing.assert_allclose(project(p, g1 + g2), project(p, g1) + project(p, g2), atol=1e-10)
    np.testing.assert_allclose(project(p, g1), p.components_.T @ g1, atol=1e-12)
    with pytest.raises(ValueError):
        project(p, np.zeros(29))


def test_projection_preserves_norm_in_expectation():
    g = np.zeros(50)
    g[0] = 1.0
    sq = [np.sum(project(Projector(20, seed=s).fit_dim(50), g) ** 2) for s in range(200)]
    assert abs(np.mean(sq) - 1) < 0.05


def test_jl_single_seed_small():
    assert jl_check(d=2000, k=1000, n_points=30, epsilon=0.3, seed=0) >= 0.99


def test_jl_fraction_oracle_on_identity():
    pts = make_rng(2).standard_normal((10, 5))
    assert jl_preserved_fraction(pts, pts, 0.01) == 1.0
    assert jl_preserved_fraction(pts, 2 * pts, 0.3) == 0.0


def test_kernel_examples():
    rec = records(2, 3)
    a, b = rec
    assert gradient_kernel(a, a) == pytest.approx(np.sum(a.flat**2), rel=1e-14)
    assert gradient_kernel(a, a) >= 0
    assert gradient_kernel(unit(0), unit(1)) == 0.0
    for blk in BLOCKS + ("flat",):
        naive = sum(float(x) * float(y) for x, y in zip(np.ravel(a.block(blk)), np.ravel(b.block(blk))))
        assert gradient_kernel(a, b, blk) == pytest.approx(naive, rel=1e-12, abs=1e-300)
    with pytest.raises(ValueError):
        gradient_kernel(a, b, "X")


def test_mmd_examples():
    rec = records(5, 4)
    assert abs(mmd_squared(rec, rec)) <= 1e-12
    assert abs(mmd_squared(rec, list(reversed(rec)))) <= 1e-12
    assert mmd_squared([unit(0)], [unit(1)]) == 2.0
    with pytest.raises(ValueError):
        mmd_squared([], rec)


def brute_force_mmd(s1, s2, block):
    def k(a, b):
        return sum(float(x) * float(y) for x, y in zip(np.ravel(a.block(block)), np.ravel(b.block(block))))
    n1, n2 = len(s1), len(s2)
    t11 = sum(k(a, b) for a in s1 for b in s1) / n1**2
    t22 = sum(k(a, b) for a in s2 for b in s2) / n2**2
    t12 = sum(k(a, b) for a in s1 for b in s2) / (n1 * n2)
    return t11 + t22 - 2 * t12


@pytest.mark.parametrize("block", BLOCKS + ("flat",))
def test_mmd_matches_brute_force(block):
    s1, s2 = records(3, 5), records(3, 6)
    want = brute_force_mmd(s1, s2, block)
    assert mmd_squared(s1, s2, block) == pytest.approx(want, rel=1e-12)


def test_mmd_unbiased_option():
    s1, s2 = records(4, 7), records(3, 8)
    a = np.stack([r.flat for r in s1])
    b = np.stack([r.flat for r in s2])
    off = lambda m: (m.sum() - np.trace(m)) / (len(m) * (len(m) - 1))
    want = off(a @ a.T) + off(b @ b.T) - 2 * (a @ b.T).mean()
    assert mmd_squared(s1, s2, unbiased=True) == pytest.approx(want, rel=1e-12)
    with pytest.raises(ValueError):
        mmd_squared(s1[:1], s2, unbiased=True)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 6), st.integers(1, 6))
def test_mmd_symmetric_and_nonnegative(seed, n1, n2):
    s1, s2 = records(n1, seed), records(n2, seed + 1)
    a, b = mmd_squared(s1, s2), mmd_squared(s2, s1)
    assert a == pytest.approx(b, rel=1e-12, abs=1e-15)
    assert a >= -1e-10


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(BLOCKS + ("flat",)))
def test_theorem_identity_on_random_batches(seed, block):
    rep = verify_theorem(records(16, seed, seed), records(16, seed + 1, seed), block)
    assert rep.rel_discrepancy <= 1e-9
    assert rep.passed


def test_theorem_identity_degenerate_cases():
    rec = records(4, 9)
    rep = verify_theorem(rec, rec)
    assert rep.lhs == 0.0 and rep.rhs == 0.0
    a, b = records(1, 10)[0], records(1, 11)[0]
    rep = verify_theorem([a], [b])
    want = float(np.sum((a.flat - b.flat) ** 2))
    assert rep.lhs == pytest.approx(want, rel=1e-12)
    assert rep.rhs == pytest.approx(want, rel=1e-10)


def test_theorem_report_json():
    rep = verify_theorem(records(3, 12), records(3, 13), "W")
    data = json.loads(rep.to_json())
    assert set(data) == {"block", "lhs", "rhs", "rel_discrepancy"}
    assert data["block"] == "W"


def test_gram_examples():
    a = records(1, 14)[0]
    g = gram_matrix([a])
    assert g.values.shape == (1, 1)
    assert g.values[0, 0] == pytest.approx(np.sum(a.flat**2), rel=1e-14)
    g2 = gram_matrix([a, a]).values
    scale = g2.max() ** 2
    assert abs(np.linalg.det(g2)) <= 1e-9 * scale


def jacobi_eigenvalues(a, sweeps=50):
    a = a.copy()
    n = len(a)
    for _ in range(sweeps):
        off = np.sqrt(np.sum(a**2) - np.sum(np.diag(a) ** 2))
        if off < 1e-14 * np.abs(a).max():
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                if a[p, q] == 0:
                    continue
                theta = 0.5 * np.arctan2(2 * a[p, q], a[q, q] - a[p, p])
                c, s = np.cos(theta), np.sin(theta)
                j = np.eye(n)
                j[p, p] = j[q, q] = c
                j[p, q], j[q, p] = s, -s
                a = j.T @ a @ j
    return np.sort(np.diag(a))


@pytest.mark.parametrize("block", BLOCKS + ("flat",))
def test_gram_psd_against_jacobi(block):
    g = gram_matrix(records(10, 15), block)
    assert np.max(np.abs(g.values - g.values.T)) <= 1e-10
    ev = jacobi_eigenvalues(g.values)
    np.testing.assert_allclose(ev, g.eigenvalues(), atol=1e-9 * ev.max())
    assert ev.min() >= -1e-8 * ev.max()
    assert g.is_psd()


def test_gradient_dump_roundtrip(tmp_path):
    vecs = make_rng(16).standard_normal((4, 9))
    write_gradient_dump(tmp_path / "g.bin", vecs, "flat")
    back, tag = read_gradient_dump(tmp_path / "g.bin")
    assert tag == "flat"
    np.testing.assert_array_equal(back, vecs)
    with pytest.raises(ValueError):
        write_gradient_dump(tmp_path / "h.bin", vecs, "too-long-tag")
