"""Cooperative GLM training on encrypted models."""
from .batches import BatchSchedule
from .params import (DatasetPartition, LearningParams, Standardizer, global_standardizer,
                     targets, with_intercept)
from .shadow import ShadowResult, csgd_shadow, make_activation, predict_clear
from .system import (Party, Prediction, System, bootstrap_policy, combine, default_specs,
                     lazy_rescale, local_iteration, map_local, oracle_weights, predict, prepare,
                     reduce, release_weights, required_levels, train, train_round)

__all__ = [
    "BatchSchedule", "DatasetPartition", "LearningParams", "Standardizer", "global_standardizer",
    "targets", "with_intercept", "ShadowResult", "csgd_shadow", "make_activation", "predict_clear",
    "Party", "Prediction", "System", "bootstrap_policy", "combine", "default_specs", "lazy_rescale",
    "local_iteration", "map_local", "oracle_weights", "predict", "prepare", "reduce",
    "release_weights", "required_levels", "train", "train_round",
]
