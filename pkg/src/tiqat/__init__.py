"""Ternary quantization-aware training of small Transformer encoders with
teacher intervention, on a numpy autodiff core."""
from .config import RunConfig
from .data import Dataset, generate
from .model import ModelConfig, TransformerModel, forward, init_model
from .quant import QuantPlan, ternarize
from .schedule import InterventionSchedule, IterationPlan, TrainingBudget, plan_for

__version__ = "0.1.0"

__all__ = ["RunConfig", "Dataset", "generate", "ModelConfig", "TransformerModel", "forward",
           "init_model", "QuantPlan", "ternarize", "InterventionSchedule", "IterationPlan",
           "TrainingBudget", "plan_for"]
