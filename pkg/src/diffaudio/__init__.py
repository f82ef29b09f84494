"""Differential-attention masked teacher-student audio representation learning at desk scale."""

from .autograd import Tensor, grad_check
from .config import RunConfig, preset

__all__ = ["Tensor", "grad_check", "RunConfig", "preset"]
__version__ = "0.1.0"
