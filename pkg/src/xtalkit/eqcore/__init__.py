"""Equivariant graph network: embeddings, attention blocks, heads, loss, training."""

from __future__ import annotations

from .config import ModelConfig, LossWeights, TrainConfig
from .params import ModelParams, init_params, save_checkpoint, load_checkpoint
from .model import (PredictionBundle, embed, forward, heads, predict, make_denoiser)
from .loss import Targets, EnergyStandardizer, perturb, multitask_loss
from .train import (TrainSample, gradients, make_supervised_loss, prepare_samples,
                    train, write_loss_csv)

__all__ = [
    "ModelConfig", "LossWeights", "TrainConfig",
    "ModelParams", "init_params", "save_checkpoint", "load_checkpoint",
    "PredictionBundle", "embed", "forward", "heads", "predict", "make_denoiser",
    "Targets", "EnergyStandardizer", "perturb", "multitask_loss",
    "TrainSample", "gradients", "make_supervised_loss", "prepare_samples",
    "train", "write_loss_csv",
]
