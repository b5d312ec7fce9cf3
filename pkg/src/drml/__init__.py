"""Relational metric learning with adaptive feature ensembles."""

from .config import ModelConfig, SynthConfig, TrainerConfig, load_config
from .data import Dataset, gen_synthetic, load_features, save_features, zero_shot_split
from .checkpoint import load_checkpoint, save_checkpoint
from .estimator import RelationalMetricLearner
from .metrics import EvalReport, evaluate
from .trainer import TrainResult, embed, train

__version__ = "0.1.0"

__all__ = [
    "ModelConfig",
    "SynthConfig",
    "TrainerConfig",
    "load_config",
    "Dataset",
    "gen_synthetic",
    "load_features",
    "save_features",
    "zero_shot_split",
    "load_checkpoint",
    "save_checkpoint",
    "RelationalMetricLearner",
    "EvalReport",
    "evaluate",
    "TrainResult",
    "embed",
    "train",
    "__version__",
]
