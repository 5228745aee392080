"""Gradient-space domain discovery and simplex reweighting of data mixtures."""

from .config import ConfigError, RunConfig, TrainConfig, load_config
from .domains import DomainSpec, MixtureSpec, builtin_scenarios, get_scenario
from .geometry import GramMatrix, Projector, gram_matrix, mmd_squared, verify_theorem
from .model import (BLOCKS, GradientRecord, ModelConfig, ModelState, Sample, forward,
                    init_state, per_sample_gradients)
from .partition import DomainPartition, GradientKMeans, build_partition, kmeans
from .scheduler import MixtureTrainer, Trainer, run_experiment, sweep_m
from .weights import DomainWeightOptimizer, ObjectiveConfig, SimplexWeights, optimize_weights

__version__ = "0.1.0"
