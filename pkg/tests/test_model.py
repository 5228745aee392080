import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dograph.model import (BLOCKS, GradientRecord, ModelConfig, ModelState, Sample,
                           assemble_gradients, attention_gradients, batch_gradients,
                           batch_records, forward, forward_arrays, init_state, load_state,
                           mismatch_tensor, one_hot, per_sample_gradients, save_state)
from dograph.numerics import NonFiniteError, make_rng
from dograph.verify import finite_difference_gradient, relative_error

from conftest import random_sample


def oracle_loss(cfg, state, tokens, targets):
    """Straight-line re-implementation with explicit A, C and scalar loops for the loss."""
    n = cfg.seq_len
    X = np.array([state.embedding[t] for t in tokens])
    Q, K, V = X @ state.W_Q, X @ state.W_K, X @ state.W_V
    A = np.ones((n, n)) / n
    C = np.eye(n) - A
    T = C / (cfg.attn_temperature * n * math.sqrt(cfg.qk_dim))
    O = A @ V + T @ ((Q @ K.T) @ V)
    Z = O @ state.W_O @ state.W
    total = 0.0
    for t in range(n):
        row = Z[t]
        total += -(row[targets[t]] - math.log(sum(math.exp(z) for z in row)))
    return total / n


def test_single_position_attention_is_value_row():
    cfg = ModelConfig(5, 1, 3, 2, 3, 3, 0.5)
    state = init_state(cfg, make_rng(0))
    tr = forward(cfg, state, Sample(np.array([2]), np.array([1]), 0))
    np.testing.assert_array_equal(cfg.centering(), [[0.0]])
    np.testing.assert_allclose(tr.O, tr.V, atol=0)


def test_zero_query_is_mean_pooling(tiny_cfg, tiny_state):
    state = tiny_state.copy()
    state.W_Q[:] = 0
    s = random_sample(tiny_cfg, make_rng(1))
    tr = forward(tiny_cfg, state, s)
    np.testing.assert_array_equal(tr.S, 0)
    np.testing.assert_allclose(tr.O, np.tile(tr.V.mean(axis=0), (tiny_cfg.seq_len, 1)),
                               rtol=0, atol=1e-15)


def test_loss_matches_straight_line_oracle():
    cfg = ModelConfig(vocab_size=5, seq_len=4, embed_dim=3, qk_dim=3, v_dim=3, hidden_dim=3,
                      attn_temperature=0.5)
    rng = make_rng(42)
    state = init_state(cfg, rng)
    for _ in range(5):
        s = random_sample(cfg, rng)
        got = forward(cfg, state, s).loss
        want = oracle_loss(cfg, state, s.tokens, s.targets)
        assert abs(got - want) <= 1e-12 * abs(want)


def test_forward_trace_invariants(tiny_cfg, tiny_state):
    tr = forward(tiny_cfg, tiny_state, random_sample(tiny_cfg, make_rng(3)))
    assert np.all(tr.Pi >= 0)
    np.testing.assert_allclose(tr.Pi.sum(axis=1), 1.0, atol=1e-12)
    assert tr.loss >= 0


def test_forward_deterministic(tiny_cfg, tiny_state):
    s = random_sample(tiny_cfg, make_rng(4))
    a, b = forward(tiny_cfg, tiny_state, s), forward(tiny_cfg, tiny_state, s)
    for name in ("X", "Q", "K", "V", "S", "O", "H", "Z", "Pi"):
        assert np.array_equal(getattr(a, name), getattr(b, name))
    assert a.loss == b.loss


@pytest.mark.parametrize("n", [4, 16])
def test_uniform_predictor_loss_is_log_vocab(n):
    cfg = ModelConfig(vocab_size=32, seq_len=n)
    state = init_state(cfg, make_rng(0))
    state.W[:] = 0
    s = random_sample(cfg, make_rng(1))
    assert forward(cfg, state, s).loss == math.log(32)


def test_forward_names_non_finite_tensor(tiny_cfg, tiny_state):
    state = tiny_state.copy()
    state.W_O[0, 0] = np.inf
    with pytest.raises(NonFiniteError, match="H"):
        forward(tiny_cfg, state, random_sample(tiny_cfg, make_rng(5)))


def test_batched_forward_matches_single(tiny_cfg, tiny_state):
    rng = make_rng(6)
    samples = [random_sample(tiny_cfg, rng) for _ in range(4)]
    tokens = np.stack([s.tokens for s in samples])
    targets = np.stack([s.targets for s in samples])
    losses, flat = batch_gradients(tiny_cfg, tiny_state, tokens, targets)
    for i, s in enumerate(samples):
        tr = forward(tiny_cfg, tiny_state, s)
        assert abs(losses[i] - tr.loss) < 1e-14
        np.testing.assert_allclose(flat[i], per_sample_gradients(tiny_cfg, tiny_state, tr, s).flat,
                                   rtol=1e-12, atol=1e-15)


def test_gradients_vanish_when_targets_equal_predictions(tiny_cfg, tiny_state):
    s = random_sample(tiny_cfg, make_rng(7))
    tr = forward(tiny_cfg, tiny_state, s)
    rec = per_sample_gradients(tiny_cfg, tiny_state, tr, s, y=tr.Pi)
    for b in BLOCKS:
        assert not np.any(rec.block(b))
    assert not np.any(mismatch_tensor(tiny_cfg, tr, tiny_state, s, y=tr.Pi))


def test_finite_differences_spec_instance():
    cfg = ModelConfig(vocab_size=4, seq_len=3, embed_dim=2, qk_dim=2, v_dim=2, hidden_dim=2,
                      attn_temperature=0.5)
    rng = make_rng(11)
    sl = cfg.block_slices()
    for _ in range(5):
        state = init_state(cfg, rng, 1.5)
        s = random_sample(cfg, rng)
        rec = per_sample_gradients(cfg, state, forward(cfg, state, s), s)
        fd = finite_difference_gradient(cfg, state, s, 1e-5)
        for b in BLOCKS:
            assert relative_error(rec.flat[sl[b]], fd[sl[b]]) <= 1e-5, b


def test_g_w_hand_built_instance():
    cfg = ModelConfig(vocab_size=3, seq_len=2, embed_dim=2, qk_dim=1, v_dim=2, hidden_dim=2,
                      attn_temperature=1.0)
    emb = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    state = ModelState(emb, np.eye(2), np.array([[1.0], [0.0]]), np.array([[0.0], [1.0]]),
                       np.array([[1.0, 2.0], [0.0, 1.0]]),
                       np.array([[0.5, -1.0, 0.0], [1.0, 0.0, -0.5]]))
    s = Sample(np.array([0, 2]), np.array([1, 0]), 0)
    tr = forward(cfg, state, s)
    y = np.zeros((2, 3))
    y[0, 1] = y[1, 0] = 1.0
    want = tr.H.T @ ((tr.Pi - y) / 2)
    np.testing.assert_array_equal(per_sample_gradients(cfg, state, tr, s).g_W, want)


def test_mismatch_equals_upstream_gradient(tiny_cfg, tiny_state):
    rng = make_rng(12)
    for _ in range(5):
        s = random_sample(tiny_cfg, rng)
        tr = forward(tiny_cfg, tiny_state, s)
        g_h = ((tr.Pi - one_hot(s.targets, tiny_cfg.vocab_size)) / tiny_cfg.seq_len) @ tiny_state.W.T
        g_o = g_h @ tiny_state.W_O.T
        r = mismatch_tensor(tiny_cfg, tr, tiny_state, s)
        assert np.max(np.abs(r - g_o)) <= 1e-12


def test_mismatch_with_identity_maps():
    cfg = ModelConfig(vocab_size=3, seq_len=4, embed_dim=3, qk_dim=2, v_dim=3, hidden_dim=3,
                      attn_temperature=0.5)
    state = init_state(cfg, make_rng(13))
    state.W_O[:] = np.eye(3)
    state.W[:] = np.eye(3)
    s = random_sample(cfg, make_rng(14))
    tr = forward(cfg, state, s)
    want = (tr.Pi - one_hot(s.targets, 3)) / cfg.seq_len
    np.testing.assert_array_equal(mismatch_tensor(cfg, tr, state, s), want)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_gradients_linear_in_mismatch(seed):
    cfg = ModelConfig(vocab_size=5, seq_len=4, embed_dim=3, qk_dim=2, v_dim=3, hidden_dim=3,
                      attn_temperature=0.5)
    rng = make_rng(seed)
    state = init_state(cfg, rng)
    tr = forward(cfg, state, random_sample(cfg, rng))
    r1, r2 = rng.standard_normal((2, cfg.seq_len, cfg.v_dim))
    both = attention_gradients(cfg, tr, r1 + r2)
    parts = [a + b for a, b in zip(attention_gradients(cfg, tr, r1), attention_gradients(cfg, tr, r2))]
    for x, y in zip(both, parts):
        np.testing.assert_allclose(x, y, rtol=0, atol=1e-12 * max(1.0, np.abs(y).max()))
    z1, z2 = rng.standard_normal((2, cfg.seq_len, cfg.vocab_size))
    full = assemble_gradients(cfg, state, tr, z1 + z2).flat
    split = assemble_gradients(cfg, state, tr, z1).flat + assemble_gradients(cfg, state, tr, z2).flat
    np.testing.assert_allclose(full, split, rtol=0, atol=1e-12 * max(1.0, np.abs(split).max()))


def test_init_deterministic_and_scale_checked(tiny_cfg):
    a, b = init_state(tiny_cfg, make_rng(3), 0.7), init_state(tiny_cfg, make_rng(3), 0.7)
    assert np.array_equal(a.flat(), b.flat())
    assert np.array_equal(a.embedding, b.embedding)
    with pytest.raises(ValueError):
        init_state(tiny_cfg, make_rng(3), 0.0)


def test_init_std():
    cfg = ModelConfig(vocab_size=8, seq_len=4, embed_dim=256, qk_dim=4, v_dim=256, hidden_dim=4)
    state = init_state(cfg, make_rng(0), 2.0)
    assert abs(state.W_V.std() / (2.0 / 16.0) - 1) < 0.05


def test_embedding_frozen(tiny_state):
    with pytest.raises(ValueError):
        tiny_state.embedding[0, 0] = 1.0


def test_gradient_record_layout(tiny_cfg, tiny_state):
    rec = batch_records(tiny_cfg, tiny_state, [random_sample(tiny_cfg, make_rng(15))])[0]
    assert rec.flat.size == tiny_cfg.n_params == sum(
        r * c for r, c in tiny_cfg.block_shapes().values())
    expect = np.concatenate([rec.block(b).ravel() for b in BLOCKS])
    np.testing.assert_array_equal(rec.flat, expect)
    back = GradientRecord.from_flat(tiny_cfg, rec.flat)
    for b in BLOCKS:
        np.testing.assert_array_equal(back.block(b), rec.block(b))


def test_sample_validation(tiny_cfg, tiny_state):
    with pytest.raises(ValueError):
        forward(tiny_cfg, tiny_state, Sample(np.array([0, 1, 2]), np.array([0, 1, 2]), 0))
    with pytest.raises(ValueError):
        forward(tiny_cfg, tiny_state, Sample(np.array([0, 1, 2, 9]), np.array([0, 1, 2, 3]), 0))


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(vocab_size=0)
    with pytest.raises(ValueError):
        ModelConfig(attn_temperature=0.0)


def test_checkpoint_roundtrip(tmp_path, tiny_cfg, tiny_state):
    path = tmp_path / "s.bin"
    save_state(path, tiny_cfg, tiny_state)
    raw = path.read_bytes()
    header = np.frombuffer(raw[:56], dtype="<i8")
    assert header.tolist() == [5, 4, 3, 3, 3, 3, 1]
    cfg, state = load_state(path, tiny_cfg.attn_temperature)
    assert cfg == tiny_cfg
    assert np.array_equal(state.flat(), tiny_state.flat())
    assert np.array_equal(state.embedding, tiny_state.embedding)
    path.write_bytes(raw[:-8])
    with pytest.raises(ValueError):
        load_state(path)
