"""Single-layer linearized-attention language model with closed-form gradients.

The attention softmax is replaced by its first-order expansion around the
uniform matrix, ``P = A + C S / (tau n)`` with ``A = 11^T / n`` and
``C = I - A``. This expansion *is* the model, so the analytic per-sample
gradients below are exact and can be checked against finite differences
at tight tolerances.

All array functions accept an optional leading batch axis: ``(n, d)``
inputs give single-sample results, ``(B, n, d)`` give per-sample results
for a whole batch in one pass.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .numerics import NonFiniteError, row_log_softmax

BLOCKS = ("V", "Q", "K", "O", "W")
FORMAT_VERSION = 1
_HEADER = struct.Struct("<7q")


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 32
    seq_len: int = 16
    embed_dim: int = 16
    qk_dim: int = 8
    v_dim: int = 8
    hidden_dim: int = 16
    attn_temperature: float = 0.05

    def __post_init__(self):
        for f in fields(self):
            if f.name != "attn_temperature" and getattr(self, f.name) < 1:
                raise ValueError(f"ModelConfig.{f.name} must be >= 1, got {getattr(self, f.name)}")
        if not self.attn_temperature > 0:
            raise ValueError(f"ModelConfig.attn_temperature must be > 0, got {self.attn_temperature}")

    def block_shapes(self) -> dict[str, tuple[int, int]]:
        d = self.embed_dim
        return {
            "V": (d, self.v_dim),
            "Q": (d, self.qk_dim),
            "K": (d, self.qk_dim),
            "O": (self.v_dim, self.hidden_dim),
            "W": (self.hidden_dim, self.vocab_size),
        }

    @property
    def n_params(self) -> int:
        return sum(r * c for r, c in self.block_shapes().values())

    def block_slices(self) -> dict[str, slice]:
        out, start = {}, 0
        for b, (r, c) in self.block_shapes().items():
            out[b] = slice(start, start + r * c)
            start += r * c
        return out

    def centering(self) -> np.ndarray:
        """The linearization operator ``T = C / (tau n sqrt(d_k))``."""
        n = self.seq_len
        c = np.eye(n) - np.full((n, n), 1.0 / n)
        return c / (self.attn_temperature * n * np.sqrt(self.qk_dim))


@dataclass
class ModelState:
    """Trainable blocks plus the frozen embedding table.

    Blocks are stored as ``W_V, W_Q, W_K, W_O, W``; the flat parameter
    vector concatenates them in that order (row-major), matching
    :attr:`GradientRecord.flat`.
    """

    embedding: np.ndarray
    W_V: np.ndarray
    W_Q: np.ndarray
    W_K: np.ndarray
    W_O: np.ndarray
    W: np.ndarray

    def block(self, b: str) -> np.ndarray:
        return getattr(self, "W" if b == "W" else f"W_{b}")

    def flat(self) -> np.ndarray:
        return np.concatenate([self.block(b).ravel() for b in BLOCKS])

    def with_flat(self, theta: np.ndarray) -> "ModelState":
        theta = np.asarray(theta, dtype=np.float64)
        blocks, start = {}, 0
        for b in BLOCKS:
            shape = self.block(b).shape
            size = shape[0] * shape[1]
            blocks[b] = theta[start:start + size].reshape(shape).copy()
            start += size
        if start != theta.size:
            raise ValueError(f"flat parameter vector has length {theta.size}, expected {start}")
        return ModelState(self.embedding, blocks["V"], blocks["Q"], blocks["K"],
                          blocks["O"], blocks["W"])

    def copy(self) -> "ModelState":
        return ModelState(*(getattr(self, f.name).copy() for f in fields(self)))

    def check(self, cfg: ModelConfig) -> None:
        if self.embedding.shape != (cfg.vocab_size, cfg.embed_dim):
            raise ValueError(f"embedding shape {self.embedding.shape} does not match config")
        for b, shape in cfg.block_shapes().items():
            if self.block(b).shape != shape:
                raise ValueError(f"block {b} has shape {self.block(b).shape}, expected {shape}")


@dataclass(frozen=True)
class Sample:
    tokens: np.ndarray
    targets: np.ndarray
    human_domain: int

    def check(self, cfg: ModelConfig) -> None:
        for name in ("tokens", "targets"):
            ids = getattr(self, name)
            if ids.shape != (cfg.seq_len,):
                raise ValueError(f"sample.{name} has shape {ids.shape}, expected ({cfg.seq_len},)")
            if ids.min() < 0 or ids.max() >= cfg.vocab_size:
                raise ValueError(f"sample.{name} has ids outside [0, {cfg.vocab_size})")


@dataclass
class ForwardTrace:
    X: np.ndarray
    Q: np.ndarray
    K: np.ndarray
    V: np.ndarray
    S: np.ndarray
    O: np.ndarray
    H: np.ndarray
    Z: np.ndarray
    Pi: np.ndarray
    loss: float | np.ndarray


@dataclass
class GradientRecord:
    g_V: np.ndarray
    g_Q: np.ndarray
    g_K: np.ndarray
    g_O: np.ndarray
    g_W: np.ndarray

    def block(self, b: str) -> np.ndarray:
        if b == "flat":
            return self.flat
        if b not in BLOCKS:
            raise ValueError(f"unknown block {b!r}; expected one of {BLOCKS + ('flat',)}")
        return getattr(self, f"g_{b}")

    @property
    def flat(self) -> np.ndarray:
        return np.concatenate([getattr(self, f"g_{b}").ravel() for b in BLOCKS])

    @classmethod
    def from_flat(cls, cfg: ModelConfig, flat: np.ndarray) -> "GradientRecord":
        sl = cfg.block_slices()
        shapes = cfg.block_shapes()
        return cls(*(np.asarray(flat[sl[b]]).reshape(shapes[b]) for b in BLOCKS))


def init_state(cfg: ModelConfig, rng: np.random.Generator, scale: float = 1.0) -> ModelState:
    """Draw every matrix i.i.d. normal with std ``scale / sqrt(rows)``."""
    if not scale > 0:
        raise ValueError(f"init scale must be > 0, got {scale}")

    def draw(shape):
        return rng.normal(0.0, scale / np.sqrt(shape[0]), size=shape)

    shapes = cfg.block_shapes()
    emb = draw((cfg.vocab_size, cfg.embed_dim))
    emb.setflags(write=False)
    return ModelState(emb, *(draw(shapes[b]) for b in BLOCKS))


def _swap(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


def _checked(name: str, value: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"forward pass produced non-finite values in {name}")
    return value


def forward_arrays(cfg: ModelConfig, state: ModelState, tokens: np.ndarray,
                   targets: np.ndarray | None = None) -> ForwardTrace:
    """Forward pass on ``(n,)`` or ``(B, n)`` token arrays.

    With a batch axis every trace field gains a leading ``B`` and ``loss`` is a
    length-``B`` vector of per-sample mean cross-entropies.
    """
    tokens = np.asarray(tokens)
    n = cfg.seq_len
    X = state.embedding[tokens]
    Q = _checked("Q", X @ state.W_Q)
    K = _checked("K", X @ state.W_K)
    V = _checked("V", X @ state.W_V)
    QKt = Q @ _swap(K)
    S = _checked("S", QKt / np.sqrt(cfg.qk_dim))
    T = cfg.centering()
    AV = np.broadcast_to(V.mean(axis=-2, keepdims=True), V.shape)
    O = _checked("O", AV + T @ (QKt @ V))
    H = _checked("H", O @ state.W_O)
    Z = _checked("Z", H @ state.W)
    logp = row_log_softmax(Z)
    Pi = np.exp(logp)
    if targets is None:
        loss = np.full(tokens.shape[:-1], np.nan) if tokens.ndim > 1 else float("nan")
    else:
        picked = np.take_along_axis(logp, np.asarray(targets)[..., None], axis=-1)[..., 0]
        loss = -picked.sum(axis=-1) / n
        if np.ndim(loss) == 0:
            loss = float(loss)
    return ForwardTrace(X, Q, K, V, S, O, H, Z, Pi, loss)


def forward(cfg: ModelConfig, state: ModelState, sample: Sample) -> ForwardTrace:
    sample.check(cfg)
    return forward_arrays(cfg, state, sample.tokens, sample.targets)


def one_hot(targets: np.ndarray, vocab_size: int) -> np.ndarray:
    targets = np.asarray(targets)
    y = np.zeros(targets.shape + (vocab_size,))
    np.put_along_axis(y, targets[..., None], 1.0, axis=-1)
    return y


def attention_gradients(cfg: ModelConfig, trace: ForwardTrace, g_o: np.ndarray):
    """Gradients of ``W_V, W_Q, W_K`` given the upstream gradient ``G_O``.

    Linear in ``g_o``; this is the path through which the mismatch tensor
    enters the three attention blocks.
    """
    X, Q, K, V = trace.X, trace.Q, trace.K, trace.V
    T = cfg.centering()
    Tt_go = T.T @ g_o
    d_v = g_o.mean(axis=-2, keepdims=True) + K @ (_swap(Q) @ Tt_go)
    d_q = Tt_go @ (_swap(V) @ K)
    d_k = V @ (_swap(g_o) @ (T @ Q))
    Xt = _swap(X)
    return Xt @ d_v, Xt @ d_q, Xt @ d_k


def assemble_gradients(cfg: ModelConfig, state: ModelState, trace: ForwardTrace,
                       g_z: np.ndarray) -> GradientRecord:
    """All five block gradients from the logit gradient ``G_Z`` (linear in ``g_z``)."""
    g_h = g_z @ state.W.T
    g_o = g_h @ state.W_O.T
    g_wv, g_wq, g_wk = attention_gradients(cfg, trace, g_o)
    g_wo = _swap(trace.O) @ g_h
    g_w = _swap(trace.H) @ g_z
    return GradientRecord(g_wv, g_wq, g_wk, g_wo, g_w)


def logit_gradient(cfg: ModelConfig, trace: ForwardTrace, targets=None, y=None) -> np.ndarray:
    """``G_Z = (Pi - Y) / n``; ``y`` overrides the one-hot target matrix."""
    if y is None:
        y = one_hot(targets, cfg.vocab_size)
    return (trace.Pi - y) / cfg.seq_len


def per_sample_gradients(cfg: ModelConfig, state: ModelState, trace: ForwardTrace,
                         sample: Sample, y: np.ndarray | None = None) -> GradientRecord:
    if trace.X.shape != (cfg.seq_len, cfg.embed_dim):
        raise ValueError(f"trace.X has shape {trace.X.shape}, expected "
                         f"({cfg.seq_len}, {cfg.embed_dim})")
    g_z = logit_gradient(cfg, trace, sample.targets, y)
    return assemble_gradients(cfg, state, trace, g_z)


def mismatch_tensor(cfg: ModelConfig, trace: ForwardTrace, state: ModelState,
                    sample: Sample, y: np.ndarray | None = None) -> np.ndarray:
    """``R = G_Z W^T W_O^T``; identical to ``G_O`` by construction."""
    g_z = logit_gradient(cfg, trace, sample.targets, y)
    m = state.W.T @ state.W_O.T
    if g_z.shape[-1] != m.shape[0]:
        raise ValueError(f"cannot form mismatch: G_Z {g_z.shape} vs M {m.shape}")
    return g_z @ m


def batch_gradients(cfg: ModelConfig, state: ModelState, tokens: np.ndarray,
                    targets: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample losses ``(B,)`` and flat gradients ``(B, n_params)``."""
    trace = forward_arrays(cfg, state, tokens, targets)
    rec = assemble_gradients(cfg, state, trace, logit_gradient(cfg, trace, targets))
    B = tokens.shape[0]
    flat = np.concatenate([getattr(rec, f"g_{b}").reshape(B, -1) for b in BLOCKS], axis=1)
    return trace.loss, flat


def batch_records(cfg: ModelConfig, state: ModelState, samples) -> list[GradientRecord]:
    tokens, targets = stack_samples(samples)
    _, flat = batch_gradients(cfg, state, tokens, targets)
    return [GradientRecord.from_flat(cfg, g) for g in flat]


def stack_samples(samples) -> tuple[np.ndarray, np.ndarray]:
    tokens = np.stack([s.tokens for s in samples])
    targets = np.stack([s.targets for s in samples])
    return tokens, targets


def save_state(path, cfg: ModelConfig, state: ModelState) -> None:
    """Write the flat binary checkpoint: 7 int64 header then float64 blocks.

    Header is ``(|V|, n, d, d_k, d_v, d_h, version)``; the body is the
    embedding followed by ``W_V, W_Q, W_K, W_O, W``, all little-endian row-major.
    """
    state.check(cfg)
    header = _HEADER.pack(cfg.vocab_size, cfg.seq_len, cfg.embed_dim, cfg.qk_dim,
                          cfg.v_dim, cfg.hidden_dim, FORMAT_VERSION)
    body = np.concatenate([state.embedding.ravel(), state.flat()]).astype("<f8")
    with open(Path(path), "wb") as fh:
        fh.write(header)
        fh.write(body.tobytes())


def load_state(path, attn_temperature: float = ModelConfig.attn_temperature) -> tuple[ModelConfig, ModelState]:
    """Read a checkpoint; ``attn_temperature`` is not stored in the file."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated checkpoint header")
    V, n, d, dk, dv, dh, version = _HEADER.unpack_from(raw)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    cfg = ModelConfig(V, n, d, dk, dv, dh, attn_temperature)
    body = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size).astype(np.float64)
    n_emb = V * d
    if body.size != n_emb + cfg.n_params:
        raise ValueError(f"{path}: body has {body.size} floats, expected {n_emb + cfg.n_params}")
    emb = body[:n_emb].reshape(V, d)
    emb.setflags(write=False)
    template = ModelState(emb, *(np.zeros(s) for s in cfg.block_shapes().values()))
    return cfg, template.with_flat(body[n_emb:])
