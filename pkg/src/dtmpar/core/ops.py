"""Differentiable operations over :class:`~dtmpar.core.tensor.Tensor`.

Convolution is cross-correlation (no kernel flip): the 1x1 case is exactly
template matching of a per-location feature vector against a template.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from dtmpar.core.tensor import Tensor
from dtmpar.errors import DegenerateBatchError, DimensionError


def _require_rank(x: Tensor, rank: int, op: str) -> None:
    if x.ndim != rank:
        raise DimensionError(f"{op} expects a rank-{rank} tensor, got shape {x.shape}")


# -- convolution --------------------------------------------------------------


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of an NCHW input with an (OC, C, k, k) kernel. No bias."""
    _require_rank(x, 4, "conv2d input")
    _require_rank(kernel, 4, "conv2d kernel")
    n, c, h, w = x.shape
    oc, kc, kh, kw = kernel.shape
    if kc != c:
        raise DimensionError(f"conv2d channel mismatch: input axis 1 has {c}, kernel axis 1 has {kc}")
    if kh != kw:
        raise DimensionError(f"conv2d needs square kernels, got axes 2,3 = {kh},{kw}")
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d needs stride >= 1 and padding >= 0, got {stride}, {padding}")
    k = kh
    ho, wo = conv_output_size(h, k, stride, padding), conv_output_size(w, k, stride, padding)
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d kernel {k} does not fit input spatial axes (2,3) = {h},{w}")

    wmat = kernel.data.reshape(oc, c * k * k)
    if k == 1 and padding == 0:
        xs = x.data[:, :, ::stride, ::stride] if stride > 1 else x.data
        cols = np.ascontiguousarray(xs.transpose(0, 2, 3, 1)).reshape(n * ho * wo, c)
    else:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
        win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
        cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * k * k)
    out = (cols @ wmat.T).reshape(n, ho, wo, oc).transpose(0, 3, 1, 2)

    def backward(g: np.ndarray) -> None:
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * ho * wo, oc)
        if kernel.requires_grad:
            kernel._accumulate((g2.T @ cols).reshape(kernel.shape))
        if not x.requires_grad:
            return
        dcols = (g2 @ wmat).reshape(n, ho, wo, c, k, k)
        if k == 1 and padding == 0:
            if stride == 1:
                x._accumulate(dcols[..., 0, 0].transpose(0, 3, 1, 2))
            else:
                dx = np.zeros(x.shape, dtype=x.dtype)
                dx[:, :, ::stride, ::stride][:, :, :ho, :wo] = dcols[..., 0, 0].transpose(0, 3, 1, 2)
                x._accumulate(dx)
            return
        dxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=x.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[..., i, j].transpose(0, 3, 1, 2)
        x._accumulate(dxp[:, :, padding : padding + h, padding : padding + w])

    return Tensor._from_op(np.ascontiguousarray(out), (x, kernel), backward)


# -- batch normalisation -------------------------------------------------------


@dataclass
class BatchNormState:
    """Per-channel batch-norm parameters and running statistics.

    ``variant="spatial"`` normalises rank-4 NCHW input over (N, H, W);
    ``variant="vector"`` normalises rank-2 (N, C) input over N.
    """

    num_channels: int
    variant: str = "spatial"
    eps: float = 1e-5
    momentum: float = 0.1
    affine: bool = True
    mode: str = "train"
    dtype: object = np.float64
    gamma: Tensor = field(init=False)
    beta: Tensor = field(init=False)
    running_mean: np.ndarray = field(init=False)
    running_var: np.ndarray = field(init=False)

    def __post_init__(self):
        if self.variant not in ("spatial", "vector"):
            raise ValueError(f"unknown batch-norm variant {self.variant!r}")
        if self.eps <= 0:
            raise ValueError("batch-norm eps must be positive")
        if not 0.0 < self.momentum < 1.0:
            raise ValueError("batch-norm momentum must lie in (0, 1)")
        c = self.num_channels
        self.gamma = Tensor(np.ones(c, dtype=self.dtype), requires_grad=self.affine)
        self.beta = Tensor(np.zeros(c, dtype=self.dtype), requires_grad=self.affine)
        self.running_mean = np.zeros(c, dtype=self.dtype)
        self.running_var = np.ones(c, dtype=self.dtype)

    def parameters(self) -> list[Tensor]:
        return [self.gamma, self.beta] if self.affine else []

    def train(self) -> None:
        self.mode = "train"

    def eval(self) -> None:
        self.mode = "eval"


def batchnorm(x: Tensor, state: BatchNormState) -> Tensor:
    """Batch normalisation with an analytic backward pass.

    Train mode normalises with biased batch statistics and folds the unbiased
    batch variance into the running estimate (PyTorch convention).  Eval mode
    uses the running estimates, which makes the op affine in ``x``.
    """
    if state.variant == "spatial":
        _require_rank(x, 4, "spatial batchnorm")
        axes: tuple[int, ...] = (0, 2, 3)
        bshape = (1, -1, 1, 1)
    else:
        _require_rank(x, 2, "vector batchnorm")
        axes = (0,)
        bshape = (1, -1)
    c = x.shape[1]
    if c != state.num_channels:
        raise DimensionError(f"batchnorm channel mismatch: input axis 1 has {c}, state has {state.num_channels}")
    count = x.size // c
    gamma = state.gamma.data.reshape(bshape)
    beta = state.beta.data.reshape(bshape)

    if state.mode == "train":
        if state.variant == "vector" and x.shape[0] == 1:
            raise DegenerateBatchError("vector batchnorm in train mode needs N >= 2 (N == 1 has zero variance)")
        if count < 2:
            raise DegenerateBatchError(f"batchnorm needs at least 2 values per channel, got {count}")
        mean = x.data.mean(axis=axes)
        centered = x.data - mean.reshape(bshape)
        var = np.einsum("nchw,nchw->c", centered, centered) / count if x.ndim == 4 else (centered * centered).mean(axis=0)
        m = state.momentum
        state.running_mean *= 1.0 - m
        state.running_mean += m * mean
        state.running_var *= 1.0 - m
        state.running_var += m * var * (count / (count - 1))
    else:
        mean = state.running_mean
        var = state.running_var
        centered = x.data - mean.reshape(bshape)

    inv_std = (1.0 / np.sqrt(var + state.eps)).astype(x.dtype)
    xhat = centered * inv_std.reshape(bshape)
    out = xhat * gamma + beta if state.affine else xhat
    training = state.mode == "train"

    def backward(g: np.ndarray) -> None:
        if state.affine:
            state.gamma._accumulate((g * xhat).sum(axis=axes))
            state.beta._accumulate(g.sum(axis=axes))
        if not x.requires_grad:
            return
        gx = g * gamma if state.affine else g
        if training:
            mean_g = gx.mean(axis=axes, keepdims=True)
            mean_gx = (gx * xhat).mean(axis=axes, keepdims=True)
            x._accumulate((gx - mean_g - xhat * mean_gx) * inv_std.reshape(bshape))
        else:
            x._accumulate(gx * inv_std.reshape(bshape))

    return Tensor._from_op(out, (x, state.gamma, state.beta), backward)


# -- pooling -----------------------------------------------------------------


def gap(x: Tensor) -> Tensor:
    """Global average pooling NCHW -> NC."""
    _require_rank(x, 4, "gap")
    n, c, h, w = x.shape
    scale = 1.0 / (h * w)

    def backward(g: np.ndarray) -> None:
        x._accumulate(np.broadcast_to((g * scale)[:, :, None, None], x.shape))

    return Tensor._from_op(x.data.mean(axis=(2, 3)), (x,), backward)


def gmp(x: Tensor) -> tuple[Tensor, np.ndarray]:
    """Global max pooling NCHW -> NC plus the flat spatial argmax per plane.

    Ties go to the lowest flat index. The backward pass routes each plane's
    whole gradient to its argmax cell.
    """
    _require_rank(x, 4, "gmp")
    n, c, h, w = x.shape
    flat = x.data.reshape(n, c, h * w)
    idx = flat.argmax(axis=2)
    out = np.take_along_axis(flat, idx[:, :, None], axis=2)[:, :, 0]

    def backward(g: np.ndarray) -> None:
        dx = np.zeros((n, c, h * w), dtype=x.dtype)
        np.put_along_axis(dx, idx[:, :, None], g[:, :, None], axis=2)
        x._accumulate(dx.reshape(x.shape))

    return Tensor._from_op(np.ascontiguousarray(out), (x,), backward), idx


# -- elementwise ---------------------------------------------------------------


def stable_sigmoid(z: np.ndarray) -> np.ndarray:
    """Logistic function without overflow for large |z|."""
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def softplus(z: np.ndarray) -> np.ndarray:
    """log(1 + exp(z)), evaluated stably."""
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


def sigmoid(x: Tensor) -> Tensor:
    s = stable_sigmoid(x.data)
    return Tensor._from_op(s, (x,), lambda g: x._accumulate(g * s * (1.0 - s)))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor._from_op(x.data * mask, (x,), lambda g: x._accumulate(g * mask))


def concat(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    if not xs:
        raise ValueError("concat needs at least one tensor")
    ref = xs[0]
    axis = axis % ref.ndim
    for t in xs[1:]:
        if t.ndim != ref.ndim:
            raise DimensionError(f"concat rank mismatch: {ref.shape} vs {t.shape}")
        for ax in range(ref.ndim):
            if ax != axis and t.shape[ax] != ref.shape[ax]:
                raise DimensionError(f"concat shape mismatch on axis {ax}: {ref.shape} vs {t.shape}")
    bounds = np.cumsum([0] + [t.shape[axis] for t in xs])
    out = np.concatenate([t.data for t in xs], axis=axis)

    def backward(g: np.ndarray) -> None:
        for t, lo, hi in zip(xs, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                t._accumulate(np.take(g, np.arange(lo, hi), axis=axis))

    return Tensor._from_op(out, tuple(xs), backward)


def take(x: Tensor, indices: Sequence[int], axis: int = 1) -> Tensor:
    """Select ``indices`` along ``axis``; gradients scatter-add back."""
    idx = np.asarray(indices, dtype=np.intp)
    axis = axis % x.ndim

    def backward(g: np.ndarray) -> None:
        dx = np.zeros(x.shape, dtype=x.dtype)
        moved = np.moveaxis(dx, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        x._accumulate(dx)

    return Tensor._from_op(np.take(x.data, idx, axis=axis), (x,), backward)
