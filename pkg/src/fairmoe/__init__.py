"""Fairness-aware sparse mixture-of-experts on a toy CLIP-style dual encoder.

Modules: ``nncore`` (float64 autodiff), ``routing`` (top-k and capacity
filters), ``moe``, ``encoder``, ``losses`` (contrastive, Sinkhorn, FOL),
``metrics``, ``data`` (synthetic biased pairs), ``train`` and ``cli``.
"""

__version__ = "0.1.0"

from .routing import CapacitySpec, GateWeights, compute_alpha, route, top_c, top_r
from .encoder import DualEncoder, ModelConfig, encode_image, encode_text
from .losses import LossWeights, StackedGates, contrastive_loss, fol, sinkhorn_distance
from .metrics import PredictionRecord, auc, dpd, eod, es_auc
from .train import TrainConfig, evaluate, train

__all__ = [
    "CapacitySpec",
    "GateWeights",
    "compute_alpha",
    "route",
    "top_c",
    "top_r",
    "DualEncoder",
    "ModelConfig",
    "encode_image",
    "encode_text",
    "LossWeights",
    "StackedGates",
    "contrastive_loss",
    "fol",
    "sinkhorn_distance",
    "PredictionRecord",
    "auc",
    "dpd",
    "eod",
    "es_auc",
    "TrainConfig",
    "evaluate",
    "train",
]
