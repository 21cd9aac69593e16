"""Inverted-pyramid multi-task transformer decoder on a small numpy autodiff engine."""

from .decoder import InvPTDecoder, MultiTaskSeq, StagePlan, plan_stages
from .encoder import ConfigError, Encoder, EncoderConfig
from .metrics import MetricReport, delta_m, max_f, miou, ods_f, rmse
from .model import InvPTModel, ModelConfig, OptimConfig, Trainer, load_checkpoint, save_checkpoint
from .prelim import TaskSpec
from .synthdata import SyntheticDataset, generate_sample
from .tensor import DimensionError, NonFiniteError, Parameter, Rng, Tensor, TapeError

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DimensionError", "Encoder", "EncoderConfig", "InvPTDecoder", "InvPTModel",
    "MetricReport", "ModelConfig", "MultiTaskSeq", "NonFiniteError", "OptimConfig", "Parameter", "Rng",
    "StagePlan", "SyntheticDataset", "TapeError", "TaskSpec", "Tensor", "Trainer", "delta_m",
    "generate_sample", "load_checkpoint", "max_f", "miou", "ods_f", "plan_stages", "rmse",
    "save_checkpoint",
]
