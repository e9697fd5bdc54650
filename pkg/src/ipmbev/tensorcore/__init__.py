"""Minimal reverse-mode autodiff over numpy and the layers built on it."""

from . import functional
from .checkpoint import load_checkpoint, save_checkpoint
from .gradcheck import grad_check
from .nn import BatchNorm2d, Conv2d, DSConv, LayerNorm, Linear, Module, param
from .optim import SGD, AdamW, Schedule, cosine_lr, make_optimizer, optimizer_step
from .tensor import Tensor, as_tensor, is_grad_enabled, no_grad

__all__ = [
    "functional", "Tensor", "as_tensor", "no_grad", "is_grad_enabled", "grad_check",
    "Module", "Linear", "Conv2d", "DSConv", "LayerNorm", "BatchNorm2d", "param",
    "SGD", "AdamW", "Schedule", "cosine_lr", "make_optimizer", "optimizer_step",
    "save_checkpoint", "load_checkpoint",
]
