"""Training loop, mixing policies, evaluation and run-directory artifacts.

One "epoch" is one optimizer step on one mini-batch. Random streams are split
by purpose so policies can be compared on identical data:

* data stream ``(seed, 1)``: batch sampling,
* algorithm stream ``(seed, 2)``: projection seeds and k-means++ seeding,
* evaluation stream ``(seed, 3)``: held-out samples and the diagnostic projector,
* init stream ``(seed, 4)``: model initialization.

A DoGraph step computes weights from *projected* cluster centroids, then
applies them to the *full-dimension* cluster mean gradients, since the
parameters live in the full space.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator

from .config import RunConfig, TrainConfig
from .domains import MixtureSpec, sample_batch_arrays, sample_domain_sequences
from .geometry import Projector, read_gradient_dump, write_gradient_dump
from .model import (ModelConfig, ModelState, batch_gradients, forward_arrays, init_state,
                    save_state)
from .numerics import NonFiniteError, make_rng, pca_2d
from .partition import build_partition, export_partition_csv, label_separation
from .weights import SimplexWeights, optimize_weights

log = logging.getLogger(__name__)

DATA_STREAM, ALGO_STREAM, EVAL_STREAM, INIT_STREAM = 1, 2, 3, 4


class TrainingAborted(RuntimeError):
    """Raised when training hits a non-finite loss; a last-good checkpoint is saved."""


@dataclass
class Batch:
    tokens: np.ndarray
    targets: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return self.tokens.shape[0]


@dataclass
class StepResult:
    state: ModelState
    train_loss: float
    weights: np.ndarray
    update: np.ndarray
    weight_info: SimplexWeights | None = None
    partition: object = None
    domain_losses: dict = field(default_factory=dict)
    batch: Batch | None = None


@dataclass
class EpochRecord:
    epoch: int
    policy: str
    weights: list
    train_loss: float
    val_ppl: dict | None = None
    worst_ppl: float | None = None
    mean_ppl: float | None = None
    silhouette: float | None = None

    def to_json(self) -> str:
        return json.dumps(self.__dict__, sort_keys=True)


def learning_rate(cfg: TrainConfig, step: int) -> float:
    """Learning rate for 1-based ``step``: constant, or linear warmup then cosine to ``lr_end``."""
    if cfg.lr_schedule == "constant":
        return cfg.lr
    if step <= cfg.warmup_steps:
        return cfg.lr * step / max(cfg.warmup_steps, 1)
    span = max(cfg.steps - cfg.warmup_steps, 1)
    frac = min((step - cfg.warmup_steps) / span, 1.0)
    return cfg.lr_end + 0.5 * (cfg.lr - cfg.lr_end) * (1 + math.cos(math.pi * frac))


def apply_update(state: ModelState, direction: np.ndarray, lr: float, clip: float,
                 weight_decay: float) -> ModelState:
    """SGD step with norm clipping of ``direction`` and decoupled weight decay."""
    norm = float(np.linalg.norm(direction))
    if norm > clip:
        direction = direction * (clip / norm)
    theta = state.flat()
    return state.with_flat(theta - lr * direction - lr * weight_decay * theta)


def _check_finite(losses: np.ndarray, grads: np.ndarray) -> None:
    if not (np.all(np.isfinite(losses)) and np.all(np.isfinite(grads))):
        raise NonFiniteError("non-finite loss or gradient")


def dograph_step(model_cfg: ModelConfig, state: ModelState, batch: Batch, cfg: TrainConfig,
                 rng: np.random.Generator, step: int = 1, projector: Projector | None = None,
                 forced_weights=None) -> StepResult:
    """One DoGraph update on ``batch``.

    Per-sample gradients are projected with a freshly sampled Gaussian matrix
    (unless ``projector`` is given), clustered into ``cfg.n_clusters`` groups,
    and weighted by the configured objective. ``forced_weights`` bypasses the
    weight solver.
    """
    m = cfg.n_clusters
    if len(batch) < m:
        raise ValueError(f"batch of {len(batch)} samples is smaller than m={m}")
    losses, grads = batch_gradients(model_cfg, state, batch.tokens, batch.targets)
    _check_finite(losses, grads)
    proj_seed = int(rng.integers(2**63 - 1))
    if projector is None:
        projector = Projector(cfg.target_dim, proj_seed).fit_dim(grads.shape[1])
    part = build_partition(grads, projector, m, rng, cfg.kmeans_max_iters, cfg.kmeans_tol,
                           cfg.variance_space)
    if forced_weights is not None:
        info = SimplexWeights(np.asarray(forced_weights, dtype=np.float64), status="forced")
    else:
        info = optimize_weights(part, cfg.objective)
    w = info.w
    if cfg.reweight_mode == "cluster_mean":
        direction = w @ part.full_means
    else:
        mass = w * part.sizes
        direction = (mass @ part.full_means) / mass.sum()
    new_state = apply_update(state, direction, learning_rate(cfg, step), cfg.grad_clip,
                             cfg.weight_decay)
    return StepResult(new_state, float(losses.mean()), w, direction, info, part,
                      _domain_losses(losses, batch.labels))


def _domain_losses(losses, labels) -> dict:
    return {int(d): float(losses[labels == d].mean()) for d in np.unique(labels)}


def uniform_step(model_cfg: ModelConfig, state: ModelState, batch: Batch, cfg: TrainConfig,
                 rng=None, step: int = 1) -> StepResult:
    """Plain mean-gradient SGD; ignores the human domain labels."""
    losses, grads = batch_gradients(model_cfg, state, batch.tokens, batch.targets)
    _check_finite(losses, grads)
    direction = grads.mean(axis=0)
    new_state = apply_update(state, direction, learning_rate(cfg, step), cfg.grad_clip,
                             cfg.weight_decay)
    return StepResult(new_state, float(losses.mean()), np.ones(1), direction,
                      domain_losses=_domain_losses(losses, batch.labels))


def loss_based_proportions(domain_losses) -> np.ndarray:
    """Sampling proportions proportional to the current per-domain mean loss."""
    v = np.asarray(domain_losses, dtype=np.float64)
    if np.any(v < 0) or v.sum() <= 0:
        return np.full(v.size, 1.0 / v.size)
    return v / v.sum()


def loss_based_step(model_cfg: ModelConfig, state: ModelState, batch: Batch, cfg: TrainConfig,
                    rng=None, step: int = 1) -> StepResult:
    """Plain SGD on a batch that was drawn with loss-proportional domain weights."""
    return uniform_step(model_cfg, state, batch, cfg, rng, step)


def make_validation_set(mix: MixtureSpec, samples_per_domain: int, n: int,
                        rng: np.random.Generator) -> list[tuple[np.ndarray, np.ndarray]]:
    if samples_per_domain < 1:
        raise ValueError("samples_per_domain must be >= 1")
    return [sample_domain_sequences(d, samples_per_domain, n, rng) for d in mix.domains]


def perplexities(model_cfg: ModelConfig, state: ModelState, valset) -> list[float]:
    out = []
    for tokens, targets in valset:
        trace = forward_arrays(model_cfg, state, tokens, targets)
        out.append(float(np.exp(np.mean(trace.loss))))
    return out


def evaluate_perplexity(model_cfg: ModelConfig, state: ModelState, mix: MixtureSpec,
                        samples_per_domain: int, rng: np.random.Generator) -> list[float]:
    """``exp`` of the mean held-out cross-entropy, one value per domain."""
    valset = make_validation_set(mix, samples_per_domain, model_cfg.seq_len, rng)
    return perplexities(model_cfg, state, valset)


class Diagnostics:
    """Fixed probe batch and projector for longitudinal gradient-space views."""

    def __init__(self, model_cfg: ModelConfig, valset, target_dim: int, seed: int):
        self.model_cfg = model_cfg
        self.tokens = np.concatenate([t for t, _ in valset])
        self.targets = np.concatenate([y for _, y in valset])
        self.labels = np.concatenate([np.full(len(t), j) for j, (t, _) in enumerate(valset)])
        self.projector = Projector(target_dim, seed).fit_dim(model_cfg.n_params)

    def projected(self, state: ModelState) -> np.ndarray:
        _, grads = batch_gradients(self.model_cfg, state, self.tokens, self.targets)
        return self.projector.transform(grads)

    def silhouette(self, projected: np.ndarray) -> float | None:
        if np.unique(self.labels).size < 2:
            return None
        return label_separation(projected, self.labels)


class Trainer:
    """Runs one policy over a mixture and collects :class:`EpochRecord` rows."""

    def __init__(self, run: RunConfig, mix: MixtureSpec | None = None):
        self.run = run
        self.model_cfg = run.model
        self.cfg = run.train
        self.mix = mix if mix is not None else run.mixture()
        seed = self.cfg.seed
        self.data_rng = make_rng(seed, DATA_STREAM)
        self.algo_rng = make_rng(seed, ALGO_STREAM)
        eval_rng = make_rng(seed, EVAL_STREAM)
        self.state = init_state(self.model_cfg, make_rng(seed, INIT_STREAM), self.cfg.init_scale)
        self.valset = make_validation_set(self.mix, self.cfg.eval_samples,
                                          self.model_cfg.seq_len, eval_rng)
        self.diag = Diagnostics(self.model_cfg, self.valset, self.cfg.target_dim,
                                int(eval_rng.integers(2**63 - 1)))
        self.frozen_projector = None
        if self.cfg.freeze_projection:
            self.frozen_projector = Projector(self.cfg.target_dim, int(self.algo_rng.integers(2**63 - 1)))
            self.frozen_projector.fit_dim(self.model_cfg.n_params)
        V = self.model_cfg.vocab_size
        self.domain_losses = np.full(self.mix.n_domains, math.log(V))
        self.epoch = 0

    def sampling_proportions(self) -> np.ndarray:
        if self.cfg.policy == "loss_based":
            return loss_based_proportions(self.domain_losses)
        return self.mix.proportions

    def next_batch(self) -> Batch:
        return Batch(*sample_batch_arrays(self.mix, self.cfg.batch_size, self.model_cfg.seq_len,
                                          self.data_rng, self.sampling_proportions()))

    def step(self, forced_weights=None) -> tuple[StepResult, np.ndarray]:
        self.epoch += 1
        proportions = self.sampling_proportions()
        batch = self.next_batch()
        policy = self.cfg.policy
        if policy == "dograph":
            res = dograph_step(self.model_cfg, self.state, batch, self.cfg, self.algo_rng,
                               self.epoch, self.frozen_projector, forced_weights)
        elif policy == "uniform":
            res = uniform_step(self.model_cfg, self.state, batch, self.cfg, None, self.epoch)
        else:
            res = loss_based_step(self.model_cfg, self.state, batch, self.cfg, None, self.epoch)
        res.batch = batch
        for d, value in res.domain_losses.items():
            self.domain_losses[d] = value
        self.state = res.state
        return res, proportions

    def evaluate(self) -> tuple[list[float], float | None, np.ndarray]:
        ppl = perplexities(self.model_cfg, self.state, self.valset)
        proj = self.diag.projected(self.state)
        return ppl, self.diag.silhouette(proj), proj


def _record(trainer: Trainer, res: StepResult, proportions, evaluate: bool):
    policy = trainer.cfg.policy
    w = res.weights if policy == "dograph" else proportions
    rec = EpochRecord(trainer.epoch, policy, [float(x) for x in w], res.train_loss)
    proj = None
    if evaluate:
        ppl, sil, proj = trainer.evaluate()
        rec.val_ppl = {d.name: p for d, p in zip(trainer.mix.domains, ppl)}
        rec.worst_ppl = max(ppl)
        rec.mean_ppl = float(np.mean(ppl))
        rec.silhouette = sil
    return rec, proj


def _weights_line(trainer: Trainer, res: StepResult, proportions) -> str:
    if trainer.cfg.policy == "dograph":
        entry = res.weight_info.log_entry(trainer.epoch, trainer.cfg.objective.kind)
    else:
        entry = {"epoch": trainer.epoch, "kind": trainer.cfg.policy,
                 "w": [float(x) for x in proportions], "objective_value": None,
                 "solver_status": "n/a"}
    return json.dumps(entry, sort_keys=True)


def _save_snapshot(run_dir: Path, epoch: int, proj: np.ndarray, labels: np.ndarray) -> None:
    snap = run_dir / "snapshots"
    snap.mkdir(exist_ok=True)
    write_gradient_dump(snap / f"epoch_{epoch:04d}.bin", proj, "proj")
    (snap / f"epoch_{epoch:04d}.labels.json").write_text(json.dumps([int(x) for x in labels]))


SUMMARY_FIELDS = ["scenario", "policy", "objective", "m", "seed", "steps", "final_worst_ppl",
                  "final_mean_ppl", "initial_silhouette", "final_silhouette"]


def run_experiment(run: RunConfig, run_dir, mix: MixtureSpec | None = None) -> list[EpochRecord]:
    """Execute a full run and write its artifacts under ``run_dir``.

    Layout: ``config.snapshot``, ``metrics.jsonl``, ``weights.jsonl``,
    ``summary.csv``, ``timing.jsonl``, ``snapshots/``, ``partitions/`` and
    ``checkpoints/``. Everything except ``timing.jsonl`` is a deterministic
    function of the config.
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "checkpoints").mkdir(exist_ok=True)
    (run_dir / "config.snapshot").write_text(run.snapshot_text())
    trainer = Trainer(run, mix)
    cfg = trainer.cfg
    records: list[EpochRecord] = []

    _, init_sil, init_proj = trainer.evaluate()
    if cfg.save_snapshots:
        _save_snapshot(run_dir, 0, init_proj, trainer.diag.labels)
    if cfg.export_partitions:
        (run_dir / "partitions").mkdir(exist_ok=True)

    with open(run_dir / "metrics.jsonl", "w") as metrics_fh, \
            open(run_dir / "weights.jsonl", "w") as weights_fh, \
            open(run_dir / "timing.jsonl", "w") as timing_fh:
        for _ in range(cfg.steps):
            last_good = trainer.state
            t0 = time.perf_counter()
            try:
                res, proportions = trainer.step()
                if not np.all(np.isfinite(trainer.state.flat())):
                    raise NonFiniteError("parameters became non-finite")
            except NonFiniteError as exc:
                save_state(run_dir / "checkpoints" / "last_good.bin", trainer.model_cfg, last_good)
                raise TrainingAborted(f"epoch {trainer.epoch}: {exc}") from exc
            evaluate = trainer.epoch % cfg.eval_every == 0 or trainer.epoch == cfg.steps
            rec, proj = _record(trainer, res, proportions, evaluate)
            records.append(rec)
            metrics_fh.write(rec.to_json() + "\n")
            weights_fh.write(_weights_line(trainer, res, proportions) + "\n")
            if evaluate and cfg.save_snapshots:
                _save_snapshot(run_dir, trainer.epoch, proj, trainer.diag.labels)
            if evaluate and cfg.export_partitions and res.partition is not None:
                export_partition_csv(run_dir / "partitions" / f"epoch_{trainer.epoch:04d}.csv",
                                     res.partition, res.batch.labels)
            timing_fh.write(json.dumps({"epoch": trainer.epoch,
                                        "wall_time": time.perf_counter() - t0}) + "\n")
            if evaluate:
                log.info("epoch %d loss %.4f worst ppl %.3f", rec.epoch, rec.train_loss,
                         rec.worst_ppl)

    save_state(run_dir / "checkpoints" / "final.bin", trainer.model_cfg, trainer.state)
    final = records[-1]
    with open(run_dir / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SUMMARY_FIELDS + [f"ppl_{d.name}" for d in trainer.mix.domains])
        w.writerow([trainer.mix.name, cfg.policy, cfg.objective.kind, cfg.n_clusters, cfg.seed,
                    cfg.steps, repr(final.worst_ppl), repr(final.mean_ppl), repr(init_sil),
                    repr(final.silhouette)]
                   + [repr(final.val_ppl[d.name]) for d in trainer.mix.domains])
    return records


def _epochs_with_snapshots(run_dir: Path) -> list[int]:
    snap = Path(run_dir) / "snapshots"
    return sorted(int(p.stem.split("_")[1]) for p in snap.glob("epoch_*.bin"))


def export_figure1_data(run_dir, out_dir=None) -> list[Path]:
    """Per-snapshot CSVs of ``sample, human_domain, pc1, pc2`` from stored projections."""
    run_dir = Path(run_dir)
    epochs = _epochs_with_snapshots(run_dir)
    if len(epochs) < 2:
        raise FileNotFoundError(f"{run_dir}: need gradient snapshots at >= 2 epochs, "
                                f"found {len(epochs)}")
    out_dir = Path(out_dir) if out_dir is not None else run_dir / "figure1"
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for e in epochs:
        proj, _ = read_gradient_dump(run_dir / "snapshots" / f"epoch_{e:04d}.bin")
        labels = json.loads((run_dir / "snapshots" / f"epoch_{e:04d}.labels.json").read_text())
        pcs = pca_2d(proj)
        path = out_dir / f"epoch_{e:04d}.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sample", "human_domain", "pc1", "pc2"])
            for i, (h, xy) in enumerate(zip(labels, pcs)):
                w.writerow([i, h, repr(float(xy[0])), repr(float(xy[1]))])
        written.append(path)
    return written


def export_weight_trajectory(run_dir, out_path=None) -> Path:
    """Flatten ``weights.jsonl`` into a CSV with one column per weight."""
    run_dir = Path(run_dir)
    src = run_dir / "weights.jsonl"
    if not src.exists():
        raise FileNotFoundError(f"{src} not found")
    rows = [json.loads(line) for line in src.read_text().splitlines() if line]
    width = max((len(r["w"]) for r in rows), default=0)
    out_path = Path(out_path) if out_path is not None else run_dir / "weights.csv"
    with open(out_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "kind", "objective_value", "solver_status"]
                   + [f"w{j}" for j in range(width)])
        for r in rows:
            w.writerow([r["epoch"], r["kind"], r["objective_value"], r["solver_status"]]
                       + [repr(x) for x in r["w"]] + [""] * (width - len(r["w"])))
    return out_path


def sweep_m(run: RunConfig, m_values, out_root) -> Path:
    """One run per cluster count with a shared seed; writes ``sweep_summary.csv``."""
    out_root = Path(out_root)
    out_root.mkdir(parents=True, exist_ok=True)
    rows = []
    for m in m_values:
        if m < 1:
            raise ValueError(f"cluster counts must be >= 1, got {m}")
        sub = RunConfig(run.model, replace(run.train, n_clusters=int(m), policy="dograph"),
                        run.scenario, run.scenario_recipe)
        records = run_experiment(sub, out_root / f"m_{m:03d}")
        final = records[-1]
        rows.append([m, repr(final.worst_ppl), repr(final.mean_ppl)])
    path = out_root / "sweep_summary.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["m", "final_worst_ppl", "final_mean_ppl"])
        w.writerows(rows)
    return path


class MixtureTrainer(BaseEstimator):
    """Estimator wrapper: ``fit(mix)`` trains a policy, ``score(mix)`` rates it.

    Parameters mirror the most used :class:`TrainConfig` fields; ``model``
    and ``objective`` take config objects.

    Attributes
    ----------
    state_ : ModelState
    history_ : list of EpochRecord
    """

    def __init__(self, policy="dograph", n_clusters=11, target_dim=512, steps=2000,
                 batch_size=64, lr=0.5, grad_clip=1.0, weight_decay=1e-3, eval_every=100,
                 eval_samples=256, seed=0, model=None, objective=None):
        self.policy = policy
        self.n_clusters = n_clusters
        self.target_dim = target_dim
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.grad_clip = grad_clip
        self.weight_decay = weight_decay
        self.eval_every = eval_every
        self.eval_samples = eval_samples
        self.seed = seed
        self.model = model
        self.objective = objective

    def _run_config(self, mix: MixtureSpec) -> RunConfig:
        params = self.get_params()
        model = params.pop("model") or ModelConfig(vocab_size=mix.vocab_size)
        objective = params.pop("objective")
        train = TrainConfig(**params, **({"objective": objective} if objective else {}),
                            save_snapshots=False)
        return RunConfig(model, train, mix.name, mix.recipe)

    def fit(self, mix: MixtureSpec, y=None):
        trainer = Trainer(self._run_config(mix), mix)
        self.history_ = []
        for _ in range(self.steps):
            res, proportions = trainer.step()
            evaluate = trainer.epoch % self.eval_every == 0 or trainer.epoch == self.steps
            self.history_.append(_record(trainer, res, proportions, evaluate)[0])
        self.state_ = trainer.state
        self.model_config_ = trainer.model_cfg
        return self

    def perplexity(self, mix: MixtureSpec, samples_per_domain: int = 64, seed: int = 12345):
        return evaluate_perplexity(self.model_config_, self.state_, mix, samples_per_domain,
                                   make_rng(seed, EVAL_STREAM))

    def score(self, mix: MixtureSpec, y=None) -> float:
        """Negative worst-domain perplexity (higher is better)."""
        return -max(self.perplexity(mix))
