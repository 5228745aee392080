"""Numerical verification suite: MMD identity, finite differences, kernel PSD, JL."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .geometry import gram_matrix, jl_check, verify_theorem
from .model import (BLOCKS, ModelConfig, Sample, batch_records, forward, forward_arrays,
                    init_state, mismatch_tensor, per_sample_gradients)
from .numerics import make_rng

TINY = ModelConfig(vocab_size=6, seq_len=4, embed_dim=3, qk_dim=2, v_dim=3, hidden_dim=3,
                   attn_temperature=0.5)
ALL_BLOCKS = BLOCKS + ("flat",)

FD_STEP = 1e-5
FD_TOL = 1e-5
MISMATCH_TOL = 1e-12
PSD_TOL = 1e-8
JL_MIN_FRACTION = 0.99


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    threshold: float
    detail: dict = field(default_factory=dict)

    def __post_init__(self):
        self.passed = bool(self.passed)
        self.value = float(self.value)
        self.threshold = float(self.threshold)

    def to_dict(self) -> dict:
        return asdict(self)


def random_samples(cfg: ModelConfig, count: int, rng: np.random.Generator) -> list[Sample]:
    return [Sample(rng.integers(0, cfg.vocab_size, cfg.seq_len),
                   rng.integers(0, cfg.vocab_size, cfg.seq_len), 0) for _ in range(count)]


def theorem_check(blocks=ALL_BLOCKS, pairs: int = 20, batch: int = 16, seed: int = 0,
                  cfg: ModelConfig = TINY) -> list[CheckResult]:
    """Worst relative discrepancy of the mean-gradient / MMD^2 identity, per block."""
    rng = make_rng(seed, 10)
    worst = {b: 0.0 for b in blocks}
    for _ in range(pairs):
        state = init_state(cfg, rng, 1.0)
        recs_1 = batch_records(cfg, state, random_samples(cfg, batch, rng))
        recs_2 = batch_records(cfg, state, random_samples(cfg, batch, rng))
        for b in blocks:
            worst[b] = max(worst[b], verify_theorem(recs_1, recs_2, b).rel_discrepancy)
    return [CheckResult(f"theorem[{b}]", worst[b] <= 1e-9, worst[b], 1e-9) for b in blocks]


def finite_difference_gradient(cfg: ModelConfig, state, sample: Sample, h: float = FD_STEP):
    theta = state.flat()
    out = np.empty_like(theta)
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = h
        up = forward_arrays(cfg, state.with_flat(theta + e), sample.tokens, sample.targets).loss
        down = forward_arrays(cfg, state.with_flat(theta - e), sample.tokens, sample.targets).loss
        out[i] = (up - down) / (2 * h)
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Entrywise relative error with a floor of 1e-3 of the block's largest entry."""
    floor = 1e-3 * max(np.max(np.abs(numeric)), 1e-300)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def gradient_check(blocks=BLOCKS, instances: int = 20, seed: int = 0,
                   cfg: ModelConfig = TINY) -> list[CheckResult]:
    """Closed-form block gradients against central finite differences."""
    rng = make_rng(seed, 11)
    worst = {b: 0.0 for b in blocks}
    worst_mismatch = 0.0
    sl = cfg.block_slices()
    for _ in range(instances):
        state = init_state(cfg, rng, 1.5)
        sample = random_samples(cfg, 1, rng)[0]
        trace = forward(cfg, state, sample)
        rec = per_sample_gradients(cfg, state, trace, sample)
        fd = finite_difference_gradient(cfg, state, sample)
        flat = rec.flat
        for b in blocks:
            worst[b] = max(worst[b], relative_error(flat[sl[b]], fd[sl[b]]))
        g_o = ((trace.Pi - _one_hot(sample, cfg)) / cfg.seq_len) @ state.W.T @ state.W_O.T
        r = mismatch_tensor(cfg, trace, state, sample)
        worst_mismatch = max(worst_mismatch, float(np.max(np.abs(r - g_o))))
    out = [CheckResult(f"finite_diff[{b}]", worst[b] <= FD_TOL, worst[b], FD_TOL) for b in blocks]
    out.append(CheckResult("mismatch_identity", worst_mismatch <= MISMATCH_TOL, worst_mismatch,
                           MISMATCH_TOL))
    return out


def _one_hot(sample: Sample, cfg: ModelConfig) -> np.ndarray:
    y = np.zeros((cfg.seq_len, cfg.vocab_size))
    y[np.arange(cfg.seq_len), sample.targets] = 1.0
    return y


def psd_check(blocks=ALL_BLOCKS, batches: int = 5, batch: int = 10, seed: int = 0,
              cfg: ModelConfig = TINY) -> list[CheckResult]:
    """Smallest Gram eigenvalue relative to the largest, per block."""
    rng = make_rng(seed, 12)
    worst = {b: np.inf for b in blocks}
    for _ in range(batches):
        state = init_state(cfg, rng, 1.0)
        recs = batch_records(cfg, state, random_samples(cfg, batch, rng))
        for b in blocks:
            ev = gram_matrix(recs, b).eigenvalues()
            worst[b] = min(worst[b], ev.min() / ev.max())
    return [CheckResult(f"kernel_psd[{b}]", worst[b] >= -PSD_TOL, float(worst[b]), -PSD_TOL)
            for b in blocks]


def jl_suite(d: int = 10_000, k: int = 1_000, n_points: int = 100, epsilon: float = 0.3,
             seeds=range(5)) -> CheckResult:
    fractions = [jl_check(d, k, n_points, epsilon, s) for s in seeds]
    worst = min(fractions)
    return CheckResult("jl_preservation", worst >= JL_MIN_FRACTION, worst, JL_MIN_FRACTION,
                       {"fractions": fractions, "d": d, "k": k, "epsilon": epsilon})


def run_all(seed: int = 0, blocks=None, pairs: int = 20, batch: int = 16, instances: int = 20,
            jl_d: int = 10_000, jl_k: int = 1_000, jl_points: int = 100,
            jl_seeds: int = 5) -> list[CheckResult]:
    grad_blocks = tuple(b for b in (blocks or BLOCKS) if b != "flat")
    kernel_blocks = tuple(blocks) if blocks else ALL_BLOCKS
    results = theorem_check(kernel_blocks, pairs, batch, seed)
    if grad_blocks:
        results += gradient_check(grad_blocks, instances, seed)
    results += psd_check(kernel_blocks, seed=seed)
    results.append(jl_suite(jl_d, jl_k, jl_points, 0.3, range(seed, seed + jl_seeds)))
    return results
