"""SGD with classical momentum.

Update rule, applied per parameter ``p`` with gradient ``g``::

    v <- momentum * v + g + weight_decay * p
    p <- p - lr * v

Weight decay is folded into the gradient before the momentum buffer (the
L2-penalty form), and the velocity starts at zero.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from dtmpar.core.tensor import Tensor
from dtmpar.errors import DimensionError, NonFiniteError


def sgd_step(
    params: Sequence[Tensor],
    grads: Sequence[np.ndarray | None],
    lr: float,
    momentum: float = 0.9,
    weight_decay: float = 0.0,
    velocity: list[np.ndarray] | None = None,
) -> list[np.ndarray]:
    """Apply one update in place and return the velocity buffers.

    Missing gradients (``None``) count as zero. If any gradient is non-finite
    the step is rejected before touching a parameter.
    """
    if velocity is None:
        velocity = [np.zeros_like(p.data) for p in params]
    if not (len(params) == len(grads) == len(velocity)):
        raise DimensionError(f"sgd_step length mismatch: {len(params)} params, {len(grads)} grads, {len(velocity)} velocities")
    for i, (p, g, v) in enumerate(zip(params, grads, velocity)):
        if g is not None and g.shape != p.shape:
            raise DimensionError(f"sgd_step: grad {i} has shape {g.shape}, param has {p.shape}")
        if v.shape != p.shape:
            raise DimensionError(f"sgd_step: velocity {i} has shape {v.shape}, param has {p.shape}")
        if g is not None and not np.all(np.isfinite(g)):
            name = p.name or f"#{i}"
            raise NonFiniteError(f"sgd_step rejected: non-finite gradient for parameter {name}")

    for p, g, v in zip(params, grads, velocity):
        v *= momentum
        if g is not None:
            v += g
        if weight_decay:
            v += weight_decay * p.data
        p.data -= lr * v
    return velocity


class SGD:
    def __init__(self, params: Sequence[Tensor], lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        sgd_step(self.params, [p.grad for p in self.params], self.lr, self.momentum, self.weight_decay, self.velocity)
