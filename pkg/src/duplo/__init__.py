"""Dual-branch CNN / GRU-attention classifier for satellite image time
series, built on an in-package reverse-mode autodiff engine."""

from .rng import SeededRng
from .tensor import Tensor, finite_diff_check

__all__ = ["SeededRng", "Tensor", "finite_diff_check"]
__version__ = "0.1.0"
