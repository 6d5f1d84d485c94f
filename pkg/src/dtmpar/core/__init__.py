from dtmpar.core.gradcheck import GradCheckReport, grad_check, numerical_gradient
from dtmpar.core.ops import (
    BatchNormState,
    batchnorm,
    concat,
    conv2d,
    gap,
    gmp,
    relu,
    sigmoid,
    softplus,
    stable_sigmoid,
    take,
)
from dtmpar.core.optim import SGD, sgd_step
from dtmpar.core.tensor import Tensor

__all__ = [
    "BatchNormState",
    "GradCheckReport",
    "SGD",
    "Tensor",
    "batchnorm",
    "concat",
    "conv2d",
    "gap",
    "gmp",
    "grad_check",
    "numerical_gradient",
    "relu",
    "sgd_step",
    "sigmoid",
    "softplus",
    "stable_sigmoid",
    "take",
]
