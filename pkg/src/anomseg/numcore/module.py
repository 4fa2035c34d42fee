"""Minimal parameter-container layer over Tensor.

Modules register parameters (tensors with requires_grad) and child
modules in attribute order, so ``named_parameters`` enumerates weights
in a stable, deterministic order. That order is what the checkpoint
writer relies on.
"""

from __future__ import annotations

from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from ..errors import ShapeError
from . import functional as F
from .tensor import Tensor, get_default_dtype


class Module:

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})

    def __setattr__(self, name, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, child in self._children.items():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state(self, arrays: Dict[str, np.ndarray], prefix: str = "") -> None:
        """Load parameter values in place, casting to the active dtype."""
        own = dict(self.named_parameters())
        missing = [prefix + k for k in own if prefix + k not in arrays]
        if missing:
            raise ShapeError(f"checkpoint is missing parameters: {missing[:5]}"
                             f"{'...' if len(missing) > 5 else ''}")
        for name, p in own.items():
            arr = np.asarray(arrays[prefix + name], dtype=get_default_dtype())
            if arr.shape != p.shape:
                raise ShapeError(f"parameter '{prefix + name}': checkpoint shape "
                                 f"{arr.shape} != model shape {p.shape}")
            p.data = arr


class ModuleList(Module):

    def __init__(self, modules):
        super().__init__()
        self._items = list(modules)
        for i, m in enumerate(self._items):
            self._children[str(i)] = m

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


def _param(rng: np.random.Generator, shape, scale: float) -> Tensor:
    if scale == 0.0:
        data = np.zeros(shape)
    else:
        data = rng.normal(0.0, scale, size=shape)
    return Tensor(data, requires_grad=True)


class Linear(Module):
    """y = x @ W + b with W of shape [in, out]."""

    def __init__(self, rng: np.random.Generator, in_dim: int, out_dim: int,
                 bias: bool = True, zero_init: bool = False):
        super().__init__()
        scale = 0.0 if zero_init else 1.0 / np.sqrt(in_dim)
        self.weight = _param(rng, (in_dim, out_dim), scale)
        self.bias = Tensor(np.zeros(out_dim), requires_grad=True) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        if self.bias is not None:
            y = y + self.bias
        return y

    __call__ = forward


class LayerNorm(Module):

    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.gain = Tensor(np.ones(dim), requires_grad=True)
        self.bias = Tensor(np.zeros(dim), requires_grad=True)
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return F.layer_norm(x, self.gain, self.bias, eps=self.eps)

    __call__ = forward


class Conv2d(Module):
    """Channels-last conv wrapper holding its own weights."""

    def __init__(self, rng: np.random.Generator, in_ch: int, out_ch: int,
                 kernel: int = 3, stride: int = 1, padding: int = 1,
                 zero_init: bool = False):
        super().__init__()
        scale = 0.0 if zero_init else np.sqrt(2.0 / (kernel * kernel * in_ch))
        self.weight = _param(rng, (kernel, kernel, in_ch, out_ch), scale)
        self.bias = Tensor(np.zeros(out_ch), requires_grad=True)
        self.stride = stride
        self.padding = padding

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, stride=self.stride,
                        padding=self.padding)

    __call__ = forward


class MLP(Module):
    """linear - relu - linear."""

    def __init__(self, rng: np.random.Generator, in_dim: int, hidden: int,
                 out_dim: int, zero_init_out: bool = False):
        super().__init__()
        self.fc1 = Linear(rng, in_dim, hidden)
        self.fc2 = Linear(rng, hidden, out_dim, zero_init=zero_init_out)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(self.fc1(x).relu())

    __call__ = forward


class ResidualBlock(Module):
    """conv - norm - relu - conv + skip, channels last.

    The second conv is zero-initialized so a fresh block is the identity
    (plus the projection skip when shape changes), which keeps deep
    stacks trainable from the start.
    """

    def __init__(self, rng: np.random.Generator, in_ch: int, out_ch: int,
                 stride: int = 1):
        super().__init__()
        self.conv1 = Conv2d(rng, in_ch, out_ch, kernel=3, stride=stride, padding=1)
        self.norm = LayerNorm(out_ch)
        self.conv2 = Conv2d(rng, out_ch, out_ch, kernel=3, stride=1, padding=1,
                            zero_init=True)
        if stride != 1 or in_ch != out_ch:
            self.proj = Conv2d(rng, in_ch, out_ch, kernel=1, stride=stride, padding=0)
        else:
            self.proj = None

    def forward(self, x: Tensor) -> Tensor:
        y = self.conv2(self.norm(self.conv1(x)).relu())
        skip = self.proj(x) if self.proj is not None else x
        return y + skip

    __call__ = forward


class Embedding(Module):

    def __init__(self, rng: np.random.Generator, count: int, dim: int,
                 scale: float = 0.02):
        super().__init__()
        self.table = _param(rng, (count, dim), scale)

    def forward(self, ids: np.ndarray) -> Tensor:
        return F.take_rows(self.table, np.asarray(ids))

    __call__ = forward
