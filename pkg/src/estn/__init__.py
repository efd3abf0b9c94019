"""Enhanced Swin Transformer super-resolution network on a small numpy autodiff engine."""

from .tensor import NonFiniteError, Tensor, backward, no_grad, precision

__all__ = ["Tensor", "backward", "no_grad", "precision", "NonFiniteError"]
__version__ = "0.1.0"
