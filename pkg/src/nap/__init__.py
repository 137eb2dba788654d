"""Attention-based aggregation of sleep-stage prediction streams."""

from .autograd import Tensor, cross_entropy, gelu, layer_norm, linear, no_grad, softmax
from .checkpoint import load_checkpoint, load_model, save_checkpoint
from .dataio import read_dataset, write_dataset
from .evaluate import (
    MetricsReport,
    consensus_hypnogram,
    evaluate_methods,
    infer_recording,
    per_stage_f1,
    soft_agreement,
)
from .gradcheck import gradient_check
from .model import ModelConfig, NapModel, init_params
from .synth import (
    Hypnodensity,
    Hypnogram,
    PredictionSet,
    ReliabilityProfile,
    generate_base_predictions,
    generate_hypnogram,
    soft_vote,
)
from .train import AdamW, BatchSpec, TrainConfig, assemble_batch, sample_batch_dims, train

__version__ = "0.1.0"

__all__ = [
    "AdamW",
    "BatchSpec",
    "Hypnodensity",
    "Hypnogram",
    "MetricsReport",
    "ModelConfig",
    "NapModel",
    "PredictionSet",
    "ReliabilityProfile",
    "Tensor",
    "TrainConfig",
    "assemble_batch",
    "consensus_hypnogram",
    "cross_entropy",
    "evaluate_methods",
    "gelu",
    "generate_base_predictions",
    "generate_hypnogram",
    "gradient_check",
    "infer_recording",
    "init_params",
    "layer_norm",
    "linear",
    "load_checkpoint",
    "load_model",
    "no_grad",
    "per_stage_f1",
    "read_dataset",
    "sample_batch_dims",
    "save_checkpoint",
    "soft_agreement",
    "soft_vote",
    "softmax",
    "train",
    "write_dataset",
]
