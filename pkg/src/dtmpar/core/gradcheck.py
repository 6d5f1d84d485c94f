"""Central-difference gradient checking."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from dtmpar.core.tensor import Tensor
from dtmpar.errors import NonFiniteError


@dataclass
class GradCheckReport:
    max_rel_error: list[float]
    tol: float
    eps: float

    @property
    def passed(self) -> bool:
        return all(e < self.tol for e in self.max_rel_error)

    @property
    def worst(self) -> float:
        return max(self.max_rel_error, default=0.0)

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        errs = ", ".join(f"{e:.3e}" for e in self.max_rel_error)
        return f"gradcheck {status}: max rel err per input [{errs}] (tol {self.tol:g}, eps {self.eps:g})"


def numerical_gradient(scalar_fn: Callable[[], Tensor], t: Tensor, eps: float) -> np.ndarray:
    flat = t.data.reshape(-1)
    out = np.zeros(flat.shape, dtype=np.float64)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = scalar_fn().item()
        flat[i] = orig - eps
        fm = scalar_fn().item()
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError(f"gradcheck aborted: non-finite value at flat index {i} (f+={fp}, f-={fm})")
        out[i] = (fp - fm) / (2.0 * eps)
    return out.reshape(t.shape)


def grad_check(
    scalar_fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-5,
    tol: float = 1e-4,
) -> GradCheckReport:
    """Compare autodiff gradients of ``scalar_fn(*inputs)`` with central differences.

    The relative error for one input is ``max|a - n| / max(max|a|, max|n|)``,
    i.e. the worst elementwise deviation scaled by the gradient's magnitude;
    it is 0 when both gradients vanish.
    """
    if not 1e-7 <= eps <= 1e-4:
        raise ValueError(f"eps must lie in [1e-7, 1e-4], got {eps}")
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    value = scalar_fn(*inputs)
    if not np.all(np.isfinite(value.data)):
        raise NonFiniteError(f"gradcheck aborted: scalar_fn returned {value.data}")
    value.backward()
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.astype(np.float64) for t in inputs]

    errors = []
    for t, a in zip(inputs, analytic):
        n = numerical_gradient(lambda: scalar_fn(*inputs), t, eps)
        if not np.all(np.isfinite(a)):
            raise NonFiniteError("gradcheck aborted: non-finite analytic gradient")
        scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0))
        errors.append(0.0 if scale == 0.0 else float(np.abs(a - n).max() / scale))
    return GradCheckReport(errors, tol, eps)
