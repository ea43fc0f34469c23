"""Uncertainty-guided selection and precision-weighted fusion for multi-agent perception."""

from .autodiff import Tape, Tensor, grad_check
from .experiments import ExperimentConfig, ResultsRow
from .model import VARIANTS, CollabModel, ModelConfig
from .training import TrainConfig, evaluate, fit
from .world import ScenarioConfig, generate_frames, stack_frames

__all__ = [
    "Tape", "Tensor", "grad_check", "ExperimentConfig", "ResultsRow", "VARIANTS", "CollabModel",
    "ModelConfig", "TrainConfig", "evaluate", "fit", "ScenarioConfig", "generate_frames", "stack_frames",
]
__version__ = "0.1.0"
