"""Run configuration: training hyperparameters and the merged, versioned snapshot."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .domains import MixtureSpec, build_mixture, get_scenario
from .model import ModelConfig
from .weights import ObjectiveConfig

CONFIG_SCHEMA_VERSION = 1
POLICIES = ("dograph", "uniform", "loss_based")
LR_SCHEDULES = ("constant", "warmup_cosine")
REWEIGHT_MODES = ("cluster_mean", "sample_weighted")


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_size: int = 64
    lr: float = 0.5
    lr_schedule: str = "constant"
    warmup_steps: int = 500
    lr_end: float = 1e-4
    grad_clip: float = 1.0
    weight_decay: float = 1e-3
    target_dim: int = 512
    n_clusters: int = 11
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    policy: str = "dograph"
    seed: int = 0
    eval_every: int = 100
    eval_samples: int = 256
    init_scale: float = 1.0
    freeze_projection: bool = False
    reweight_mode: str = "cluster_mean"
    variance_space: str = "projected"
    kmeans_max_iters: int = 100
    kmeans_tol: float = 1e-10
    export_partitions: bool = False
    save_snapshots: bool = True

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError("train.lr", f"must be > 0, got {self.lr}")
        if self.steps < 1:
            raise ConfigError("train.steps", f"must be >= 1, got {self.steps}")
        if not self.grad_clip > 0:
            raise ConfigError("train.grad_clip", f"must be > 0, got {self.grad_clip}")
        if self.weight_decay < 0:
            raise ConfigError("train.weight_decay", "must be >= 0")
        for name in ("batch_size", "target_dim", "n_clusters", "eval_every", "eval_samples"):
            if getattr(self, name) < 1:
                raise ConfigError(f"train.{name}", f"must be >= 1, got {getattr(self, name)}")
        if self.policy not in POLICIES:
            raise ConfigError("train.policy", f"must be one of {POLICIES}, got {self.policy!r}")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ConfigError("train.lr_schedule", f"must be one of {LR_SCHEDULES}")
        if self.reweight_mode not in REWEIGHT_MODES:
            raise ConfigError("train.reweight_mode", f"must be one of {REWEIGHT_MODES}")
        if self.variance_space not in ("projected", "full"):
            raise ConfigError("train.variance_space", "must be 'projected' or 'full'")
        if self.policy == "dograph" and self.n_clusters > self.batch_size:
            raise ConfigError("train.n_clusters", "cannot exceed batch_size")


@dataclass(frozen=True)
class RunConfig:
    """Everything needed to replay a run: model, training and scenario."""

    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    scenario: str = "skewed-3"
    scenario_recipe: dict | None = None

    def mixture(self) -> MixtureSpec:
        if self.scenario_recipe is not None:
            mix = build_mixture(self.scenario_recipe)
        else:
            try:
                mix = get_scenario(self.scenario, self.model.vocab_size)
            except KeyError as exc:
                raise ConfigError("scenario", str(exc.args[0])) from None
        if mix.vocab_size != self.model.vocab_size:
            raise ConfigError("model.vocab_size",
                              f"{self.model.vocab_size} differs from scenario vocabulary {mix.vocab_size}")
        return mix

    def to_dict(self) -> dict:
        out = {"schema_version": CONFIG_SCHEMA_VERSION, "scenario": self.scenario,
               "model": asdict(self.model), "train": asdict(self.train)}
        if self.scenario_recipe is not None:
            out["scenario_recipe"] = self.scenario_recipe
        return out

    def snapshot_text(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _build(cls, data: dict, prefix: str):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{prefix}.{unknown[0]}", "unknown field")
    try:
        return cls(**data)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(prefix, str(exc)) from None


def config_from_dict(data: dict) -> RunConfig:
    version = data.get("schema_version", CONFIG_SCHEMA_VERSION)
    if version != CONFIG_SCHEMA_VERSION:
        raise ConfigError("schema_version", f"expected {CONFIG_SCHEMA_VERSION}, got {version!r}")
    unknown = sorted(set(data) - {"schema_version", "scenario", "scenario_recipe", "model", "train"})
    if unknown:
        raise ConfigError(unknown[0], "unknown field")
    model = _build(ModelConfig, dict(data.get("model", {})), "model")
    train_data = dict(data.get("train", {}))
    objective = _build(ObjectiveConfig, dict(train_data.pop("objective", {})), "train.objective")
    train = _build(TrainConfig, {**train_data, "objective": objective}, "train")
    return RunConfig(model, train, data.get("scenario", "skewed-3"), data.get("scenario_recipe"))


def load_config(path) -> RunConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(str(path), f"invalid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise ConfigError(str(path), "top level must be an object")
    return config_from_dict(data)


def with_overrides(cfg: RunConfig, train: dict | None = None, objective: dict | None = None,
                   model: dict | None = None, scenario: str | None = None) -> RunConfig:
    """Return ``cfg`` with field overrides applied and re-validated."""
    data = cfg.to_dict()
    if model:
        data["model"].update(model)
    if train:
        data["train"].update(train)
    if objective:
        data["train"]["objective"].update(objective)
    if scenario is not None:
        data["scenario"] = scenario
        data.pop("scenario_recipe", None)
    return config_from_dict(data)

