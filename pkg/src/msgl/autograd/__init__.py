"""Minimal float64 tensor engine with reverse-mode gradients."""

from msgl.autograd import functional
from msgl.autograd.functional import AttentionMask
from msgl.autograd.gradcheck import check_gradients, check_parameter_gradients
from msgl.autograd.random import RngStream
from msgl.autograd.tensor import Tensor, inject_backward_fault, no_grad

__all__ = [
    "AttentionMask",
    "RngStream",
    "Tensor",
    "check_gradients",
    "check_parameter_gradients",
    "functional",
    "inject_backward_fault",
    "no_grad",
]
