"""Bayesian fusion of local posteriors that share a common prior."""

from .divergence import KlSweep, cross_entropy_posterior_prior, kl_cil_cip, kl_decomposition, log_s, log_s_derivatives, sweep
from .fusion import DiscreteBelief, FusionReport, Rule, fuse, fuse_both, fuse_cil, fuse_cip, fuse_discrete_cil, fuse_discrete_cip
from .gaussian import (
    DimensionMismatch,
    GaussianBelief,
    IndefinitePrecision,
    UnnormalizedGaussian,
    divide,
    kl_divergence,
    log_density,
    power,
    product,
    sample,
)
from .local_inference import LabeledShard, ObservationNoise, TrainConfig, TrainingDivergence, laplace_fit, linear_posterior
from .mlp import MlpSpec

__version__ = "0.1.0"

__all__ = [
    "DimensionMismatch",
    "DiscreteBelief",
    "FusionReport",
    "GaussianBelief",
    "IndefinitePrecision",
    "KlSweep",
    "LabeledShard",
    "MlpSpec",
    "ObservationNoise",
    "Rule",
    "TrainConfig",
    "TrainingDivergence",
    "UnnormalizedGaussian",
    "cross_entropy_posterior_prior",
    "divide",
    "fuse",
    "fuse_both",
    "fuse_cil",
    "fuse_cip",
    "fuse_discrete_cil",
    "fuse_discrete_cip",
    "kl_cil_cip",
    "kl_decomposition",
    "kl_divergence",
    "laplace_fit",
    "linear_posterior",
    "log_density",
    "log_s",
    "log_s_derivatives",
    "power",
    "product",
    "sample",
    "sweep",
]
