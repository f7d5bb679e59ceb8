"""Convolution layers with learnable Gaussian envelopes, plus a small numpy
training stack for reproducing adaptive-scale filter experiments."""

from .adaptive import AdaptiveConv2d, LayerGradients, effective_size
from .envelope import (
    CovarianceSummary,
    EnvelopeParams,
    GridSpec,
    eigen_summary,
    envelope_eval,
    envelope_grad_sigma,
    project_positive_definite,
)
from .network import Network, NetworkSpec, build_preset, cross_entropy
from .trainer import EpochMetrics, TrainerConfig, train

__version__ = "0.1.0"
