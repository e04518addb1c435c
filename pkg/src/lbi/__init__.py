"""Bounded-interface language models with a scan-based backward pass."""
from .model import LBIModel, ModelConfig
from .backward import BackwardPlan, lbi_gradients

__version__ = "0.1.0"
__all__ = ["LBIModel", "ModelConfig", "BackwardPlan", "lbi_gradients"]
