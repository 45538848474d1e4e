"""World-model imitation learning for a toy driving task.

A recurrent state-space model (deterministic GRU history + stochastic
Gaussian state) is trained from expert demonstrations to predict actions,
bird's-eye-view semantics, and future latent states; at deployment it can
drive partly on imagination, acting without observations for a fraction of
each time window.
"""

from .config import (
    BevConfig,
    CameraConfig,
    EvalConfig,
    ModelConfig,
    RunConfig,
    SimConfig,
    TrainConfig,
)
from .data import DrivingDataset, EpisodeRecord, FrameBatch, ObservationFrame, collect
from .decoders import BevDecoder, BevPrediction, ImageDecoder, PolicyHead
from .dynamics import DiagonalGaussian, LatentDynamics, LatentState
from .encoder import ObservationEncoder
from .evaluate import (
    EpisodeLog,
    ImaginationSchedule,
    bev_iou,
    drive,
    drive_random,
    driving_score,
    imagination_sweep,
    rewards,
)
from .geometry import BevGridSpec, CameraModel, LiftedFeatures, lift, pool_adjoint, pool_to_bev
from .losses import LossWeights, kl_balanced, kl_diag_gaussian, sequence_elbo_loss
from .model import WorldModel
from .trainer import load_model, train

__version__ = "0.1.0"

__all__ = [
    "BevConfig",
    "BevDecoder",
    "BevGridSpec",
    "BevPrediction",
    "CameraConfig",
    "CameraModel",
    "DiagonalGaussian",
    "DrivingDataset",
    "EpisodeLog",
    "EpisodeRecord",
    "EvalConfig",
    "FrameBatch",
    "ImageDecoder",
    "ImaginationSchedule",
    "LatentDynamics",
    "LatentState",
    "LiftedFeatures",
    "LossWeights",
    "ModelConfig",
    "ObservationEncoder",
    "ObservationFrame",
    "PolicyHead",
    "RunConfig",
    "SimConfig",
    "TrainConfig",
    "WorldModel",
    "bev_iou",
    "collect",
    "drive",
    "drive_random",
    "driving_score",
    "imagination_sweep",
    "kl_balanced",
    "kl_diag_gaussian",
    "lift",
    "load_model",
    "pool_adjoint",
    "pool_to_bev",
    "rewards",
    "sequence_elbo_loss",
    "train",
]
