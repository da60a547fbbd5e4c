"""Toy-scale KAN/Transformer segmentation stack with a cost profiler."""

from transukan.tensor import Tensor, backward, grad_check, no_grad

__all__ = ["Tensor", "backward", "grad_check", "no_grad"]
__version__ = "0.1.0"
