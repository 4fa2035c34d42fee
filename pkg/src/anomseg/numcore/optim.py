"""AdamW with decoupled weight decay, plus a warmup-cosine schedule.

Optimizer state (first/second moments, step counter) can be exported to
and restored from plain arrays so a training run can resume exactly.
"""

from __future__ import annotations

from typing import Dict, List, Sequence, Tuple

import numpy as np

from ..errors import ParameterError, ShapeError
from .tensor import Tensor


def cosine_lr(step: int, total_steps: int, base_lr: float,
              warmup_frac: float = 0.05) -> float:
    """Linear warmup over the first ``warmup_frac`` of steps, then a
    cosine decay to zero at ``total_steps``."""
    if total_steps <= 0:
        raise ParameterError("total_steps must be positive")
    warmup = max(1, int(round(warmup_frac * total_steps)))
    if step < warmup:
        return base_lr * (step + 1) / warmup
    progress = (step - warmup) / max(1, total_steps - warmup)
    progress = min(1.0, progress)
    return base_lr * 0.5 * (1.0 + np.cos(np.pi * progress))


class AdamW:

    def __init__(self, named_params: Sequence[Tuple[str, Tensor]],
                 lr: float = 3e-4, betas: Tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.01):
        self.names: List[str] = [n for n, _ in named_params]
        self.params: List[Tensor] = [p for _, p in named_params]
        if len(set(self.names)) != len(self.names):
            raise ParameterError("duplicate parameter names passed to AdamW")
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float | None = None) -> None:
        """One update. ``lr`` overrides the stored rate (for schedules)."""
        rate = self.lr if lr is None else lr
        b1, b2 = self.betas
        self.step_count += 1
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            g = g.astype(np.float64)
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g
            mhat = self.m[i] / c1
            vhat = self.v[i] / c2
            update = mhat / (np.sqrt(vhat) + self.eps) + self.weight_decay * p.data
            p.data = (p.data - rate * update).astype(p.data.dtype)

    # ------------------------------------------------------------------
    # exact-resume support

    def export_state(self) -> Dict[str, np.ndarray]:
        state: Dict[str, np.ndarray] = {"_step": np.array([self.step_count],
                                                          dtype=np.float64)}
        for name, m, v in zip(self.names, self.m, self.v):
            state[name + ".m"] = m
            state[name + ".v"] = v
        return state

    def import_state(self, arrays: Dict[str, np.ndarray]) -> None:
        if "_step" not in arrays:
            raise ShapeError("optimizer state missing '_step'")
        self.step_count = int(round(float(arrays["_step"].reshape(-1)[0])))
        for i, name in enumerate(self.names):
            for suffix, store in ((".m", self.m), (".v", self.v)):
                key = name + suffix
                if key not in arrays:
                    raise ShapeError(f"optimizer state missing '{key}'")
                arr = np.asarray(arrays[key], dtype=np.float64)
                if arr.shape != store[i].shape:
                    raise ShapeError(f"optimizer state '{key}' has shape {arr.shape}, "
                                     f"expected {store[i].shape}")
                store[i] = arr
