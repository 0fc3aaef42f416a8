"""Desk-scale RGB/event video classification with LoRA-tuned frozen ViTs."""

from .config import RunConfig
from .errors import ConfigError, ContractError, DataError, FormatError, ShapeError, TrainingError, VeloraError
from .estimator import EventFrameEncoder, FrameDifference, VeloraClassifier, check_clips
from .events import Clip, gen_synthetic, load_dataset, rasterize
from .lora import LoRAAdapter, InjectionPolicy, inject
from .model import ModelConfig, VeloraModel, prepare
from .nn import ViTConfig
from .train import Trainer, evaluate_top1, efficiency_report, load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "Clip",
    "ConfigError",
    "ContractError",
    "DataError",
    "EventFrameEncoder",
    "FormatError",
    "FrameDifference",
    "InjectionPolicy",
    "LoRAAdapter",
    "ModelConfig",
    "RunConfig",
    "ShapeError",
    "Trainer",
    "TrainingError",
    "VeloraClassifier",
    "VeloraError",
    "VeloraModel",
    "ViTConfig",
    "check_clips",
    "efficiency_report",
    "evaluate_top1",
    "gen_synthetic",
    "inject",
    "load_checkpoint",
    "load_dataset",
    "prepare",
    "rasterize",
    "save_checkpoint",
]
