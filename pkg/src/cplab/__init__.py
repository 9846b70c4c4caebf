"""Conformal prediction lab: split/full CP, in-context learners, CP-aware training."""

from .cp import (
    EvalCounter,
    PredictionSet,
    conformal_quantile,
    fcp_predict,
    ncs_logloss,
    scp_calibrate,
    scp_predict,
)
from .model import IclTransformer, ModelConfig, build_mask
from .softcp import SoftCpHyper, pinball, soft_indicator, soft_quantile
from .tasks import Episode, QpskTaskParams, sample_episode, sample_task
from .train import TrainConfig, cosine_lr, train

__all__ = [
    "EvalCounter",
    "PredictionSet",
    "conformal_quantile",
    "fcp_predict",
    "ncs_logloss",
    "scp_calibrate",
    "scp_predict",
    "IclTransformer",
    "ModelConfig",
    "build_mask",
    "SoftCpHyper",
    "pinball",
    "soft_indicator",
    "soft_quantile",
    "Episode",
    "QpskTaskParams",
    "sample_episode",
    "sample_task",
    "TrainConfig",
    "cosine_lr",
    "train",
]
