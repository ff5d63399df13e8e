"""Mixture-of-LoRA-experts adapters on a frozen toy transformer.

Layers compose a frozen base weight with a set of low-rank experts and a
learnable-temperature soft-merge router; expert counts grow with depth and
ranks come from a small discrete set. The harness trains on synthetic
multi-task data and measures interference and forgetting.
"""

from .errors import ConfigError, DivergenceError, DomainError, ShapeError
from .tensor import Tensor, finite_diff_grad, no_grad

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "finite_diff_grad",
    "no_grad",
    "ConfigError",
    "DivergenceError",
    "DomainError",
    "ShapeError",
    "__version__",
]
