"""Finite-difference verification of analytical gradients.

The checker takes a scalar-valued function of one or more tensors,
computes analytical gradients with one backward pass, then probes every
input coordinate with a central difference (f(x+eps) - f(x-eps)) / 2eps
and reports the worst relative disagreement.

This only makes sense at 64-bit precision; calling it while the default
dtype is float32 is a contract violation, not a soft warning.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, List, Sequence

import numpy as np

from ..errors import ContractError, ShapeError
from .tensor import Tensor, get_default_dtype


@dataclass
class InputReport:
    index: int
    shape: tuple
    max_rel_err: float
    worst_coord: tuple


@dataclass
class GradReport:
    passed: bool
    max_rel_err: float
    tol: float
    eps: float
    inputs: List[InputReport] = field(default_factory=list)

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"grad_check {status}: max_rel_err={self.max_rel_err:.3e} "
                f"(tol={self.tol:.1e}, eps={self.eps:.1e})")


def _rel_err(a: np.ndarray, n: np.ndarray) -> np.ndarray:
    scale = np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))
    return np.abs(a - n) / scale


def grad_check(fn: Callable[..., Tensor], inputs: Sequence[Tensor],
               eps: float = 1e-5, tol: float = 1e-4) -> GradReport:
    """Compare analytical and central finite-difference gradients.

    ``fn`` must map the given tensors to a scalar tensor and must be
    deterministic; a function whose value changes between identical
    calls raises ContractError. Gradients are checked for every
    coordinate of every input.
    """
    if get_default_dtype() is not np.float64:
        raise ContractError("grad_check requires 64-bit verification mode; "
                            "call inside precision(np.float64)")

    leaves = [Tensor(t.data.copy(), requires_grad=True) for t in inputs]

    out = fn(*leaves)
    if not isinstance(out, Tensor) or out.size != 1:
        raise ShapeError("grad_check: fn must return a scalar tensor")
    base = out.item()
    probe = fn(*[Tensor(l.data.copy(), requires_grad=True) for l in leaves])
    if probe.item() != base:
        raise ContractError("grad_check: fn is not deterministic; seed any "
                            "randomness before checking gradients")

    out.backward()
    analytic = [l.grad if l.grad is not None else np.zeros_like(l.data)
                for l in leaves]

    plain = [Tensor(l.data.copy()) for l in leaves]
    reports: List[InputReport] = []
    worst = 0.0
    for i, leaf in enumerate(plain):
        numeric = np.zeros_like(leaf.data)
        flat = leaf.data.reshape(-1)
        nflat = numeric.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            hi = fn(*plain).item()
            flat[j] = orig - eps
            lo = fn(*plain).item()
            flat[j] = orig
            nflat[j] = (hi - lo) / (2.0 * eps)
        err = _rel_err(analytic[i], numeric)
        j = int(np.argmax(err)) if err.size else 0
        coord = np.unravel_index(j, err.shape) if err.size else ()
        worst_i = float(err.max()) if err.size else 0.0
        reports.append(InputReport(i, leaf.data.shape, worst_i, coord))
        worst = max(worst, worst_i)

    return GradReport(passed=worst < tol, max_rel_err=worst, tol=tol, eps=eps,
                      inputs=reports)
