"""Minimal differentiable building blocks on numpy."""
from . import functional
from .gradcheck import GradCheckReport, grad_check
from .kernels import BACKEND
from .layers import Conv2d, GroupNorm, Linear, Module, count_macs, norm_groups, trace_layers
from .optim import AdamW, warmup_cosine
from .tensor import Param, Tensor, as_tensor, concat, no_grad, stack

__all__ = [
    "AdamW", "BACKEND", "Conv2d", "GradCheckReport", "GroupNorm", "Linear", "Module",
    "Param", "Tensor", "as_tensor", "concat", "functional", "grad_check", "no_grad",
    "count_macs", "norm_groups", "stack", "trace_layers", "warmup_cosine",
]
