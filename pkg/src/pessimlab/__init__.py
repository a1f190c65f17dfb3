"""Offline model-based RL laboratory for comparing uncertainty penalties.

Small numeric environments with exact dynamics, a numpy probabilistic
ensemble, six penalty heuristics, a pessimistic MDP with fixed or
automatically tuned penalty weight, and protocols that score how well each
penalty tracks true model error.
"""

__version__ = "0.1.0"

from .core import Dataset, DatasetError, Transition, dataset_read, dataset_write
from .dynamics import EnsembleModel, ModelConfig, load_model, save_model, train_ensemble
from .envlab import ENV_IDS, generate_dataset, make_env
from .penalty import ALL_KINDS, PenaltyContext, PenaltyKind, compute_penalty, penalty_batch
from .planner import CEMConfig, CEMPolicy, UniformPolicy
from .pmdp import PMDPConfig, PenaltyWeightTuner, RolloutRecord, rollout

__all__ = [
    "ALL_KINDS", "CEMConfig", "CEMPolicy", "Dataset", "DatasetError", "ENV_IDS", "EnsembleModel",
    "ModelConfig", "PMDPConfig", "PenaltyContext", "PenaltyKind", "PenaltyWeightTuner", "RolloutRecord",
    "Transition", "UniformPolicy", "compute_penalty", "dataset_read", "dataset_write", "generate_dataset",
    "load_model", "make_env", "penalty_batch", "rollout", "save_model", "train_ensemble",
]
