"""Autograd subpackage: float64 tensors with a dynamic reverse-mode tape."""

from autograd.tensor import Graph, Tensor, backward, grad_enabled, no_grad

__all__ = ["Graph", "Tensor", "backward", "grad_enabled", "no_grad"]
