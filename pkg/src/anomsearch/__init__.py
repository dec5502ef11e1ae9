"""Text-based person anomaly retrieval at desk scale: a from-scratch tensor
engine, pose-aware cross-modal encoders, identity-structured synthetic data,
and a two-stage retrieval evaluator."""

from .model import ModelConfig, RetrievalModel
from .tensor import Tensor, gradient_check, no_grad, precision

__all__ = ["ModelConfig", "RetrievalModel", "Tensor", "gradient_check",
           "no_grad", "precision"]
__version__ = "0.1.0"
