"""Variational-inference lab for importance-weighted bounds.

A single-stochastic-layer latent-variable model, the family of bound
estimators built on shared log importance weights (plain, importance
weighted, multi-group, convex-combination, and dual-target), a gradient
signal-to-noise measurement harness on a tractable Gaussian testbed, and
the training/evaluation machinery to study them.
"""

from .bounds import (
    BoundConfig,
    GradEstimate,
    LogWeightMatrix,
    default_config,
    elbo_ciwae,
    elbo_iwae,
    elbo_miwae,
    elbo_vae,
    grad_beta,
    gradients,
    gradients_piwae,
    sample_log_weights,
)
from .model import LARGER, REFERENTIAL, ModelConfig, ModelParams, init_params, param_count
from .tensor import Tape, Tensor, backward, finite_diff_check
from .training import TrainConfig, lr_schedule, train

__all__ = [
    "BoundConfig",
    "GradEstimate",
    "LogWeightMatrix",
    "LARGER",
    "ModelConfig",
    "ModelParams",
    "REFERENTIAL",
    "Tape",
    "Tensor",
    "TrainConfig",
    "backward",
    "default_config",
    "elbo_ciwae",
    "elbo_iwae",
    "elbo_miwae",
    "elbo_vae",
    "finite_diff_check",
    "grad_beta",
    "gradients",
    "gradients_piwae",
    "init_params",
    "lr_schedule",
    "param_count",
    "sample_log_weights",
    "train",
]
