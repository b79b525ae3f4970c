"""reidlab: a desk-scale unsupervised person re-identification workbench."""

from .autodiff import Tensor, backward, tensor, zero_grads

__version__ = "0.1.0"

__all__ = ["Tensor", "tensor", "backward", "zero_grads", "__version__"]
