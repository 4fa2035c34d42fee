"""Numeric substrate: autodiff tensors, kernels, optimizer, checkpoints."""

from . import functional
from .checkpoint import MAGIC, VERSION, load_checkpoint, save_checkpoint
from .gradcheck import GradReport, grad_check
from .module import (MLP, Conv2d, Embedding, LayerNorm, Linear, Module,
                     ModuleList, ResidualBlock)
from .optim import AdamW, cosine_lr
from .tensor import (Tensor, get_default_dtype, grad_enabled, no_grad,
                     precision, set_default_dtype)

__all__ = [
    "Tensor", "functional", "no_grad", "precision", "set_default_dtype",
    "get_default_dtype", "grad_enabled", "grad_check", "GradReport",
    "Module", "ModuleList", "Linear", "LayerNorm", "Conv2d", "MLP",
    "ResidualBlock", "Embedding", "AdamW", "cosine_lr",
    "save_checkpoint", "load_checkpoint", "MAGIC", "VERSION",
]
