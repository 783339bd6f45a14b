"""Decision engine: Q-model, training, corrective feedback and the model registry."""

from carm.drl.features import FEATURES, Action, Aggregate, DrlState, featurize
from carm.drl.qnet import QModel, predict
from carm.drl.registry import (
    FeedbackConfig,
    FeedbackRecord,
    ModelRegistry,
    feedback,
    load_registry,
    save_registry,
    select_model,
)
from carm.drl.reward import Outcome, reward
from carm.drl.train import TrainConfig, Transition, train_meta, train_online

__all__ = [
    "FEATURES",
    "Action",
    "Aggregate",
    "DrlState",
    "FeedbackConfig",
    "FeedbackRecord",
    "ModelRegistry",
    "Outcome",
    "QModel",
    "TrainConfig",
    "Transition",
    "featurize",
    "feedback",
    "load_registry",
    "predict",
    "reward",
    "save_registry",
    "select_model",
    "train_meta",
    "train_online",
]
