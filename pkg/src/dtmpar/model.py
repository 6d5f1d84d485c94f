"""Backbone, deep-template-matching head and the FC+BN baseline head.

A DTM head scores every spatial cell of the backbone feature map against one
1x1 template per attribute, batch-normalises the resulting heatmaps per
attribute over (N, H, W), then pools: global attributes by average, local
attributes by max.  Logit column ``j`` always belongs to schema attribute
``j`` regardless of how the attributes are split between the two poolings.

Template convolutions carry no bias; the following batch norm's shift plays
that role.

Complexity counting conventions (:func:`model_stats`):

* conv: ``2 * k^2 * C_in * C_out * H_out * W_out`` FLOPs, ``k^2 * C_in * C_out`` params
* batch norm: 2 FLOPs per element (folded scale and shift); gamma and beta are params,
  running statistics are not
* ReLU: 1 FLOP per element
* GAP / GMP: ``H * W`` FLOPs per pooled plane
* FC: ``2 * C * J`` FLOPs per sample
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from dtmpar.core import BatchNormState, Tensor, batchnorm, concat, conv2d, gap, gmp, relu, take
from dtmpar.core.ops import conv_output_size
from dtmpar.errors import DimensionError
from dtmpar.schema import AttributeSchema

HEAD_MODES = ("fc_baseline", "dtm_gap", "dtm_gmp", "dtm_mixed")


# -- layers ------------------------------------------------------------------------


class Conv2d:
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3, stride: int = 1,
                 padding: int | None = None, rng: np.random.Generator | None = None, dtype=np.float64):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = kernel_size // 2 if padding is None else padding
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = in_channels * kernel_size * kernel_size
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(out_channels, in_channels, kernel_size, kernel_size))
        self.weight = Tensor(w.astype(dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.stride, self.padding)

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        return {prefix + "weight": self.weight}

    def named_buffers(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {}

    def stats(self, h: int, w: int) -> tuple[int, int, int, int]:
        k = self.kernel_size
        ho = conv_output_size(h, k, self.stride, self.padding)
        wo = conv_output_size(w, k, self.stride, self.padding)
        params = k * k * self.in_channels * self.out_channels
        return params, 2 * params * ho * wo, ho, wo


class BatchNorm2d:
    def __init__(self, channels: int, affine: bool = True, dtype=np.float64):
        self.state = BatchNormState(channels, variant="spatial", affine=affine, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return batchnorm(x, self.state)

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        return _bn_params(self.state, prefix)

    def named_buffers(self, prefix: str = "") -> dict[str, np.ndarray]:
        return _bn_buffers(self.state, prefix)

    def stats(self, h: int, w: int) -> tuple[int, int, int, int]:
        c = self.state.num_channels
        return (2 * c if self.state.affine else 0), 2 * c * h * w, h, w


class ReLU:
    def __init__(self, channels: int):
        self.channels = channels

    def __call__(self, x: Tensor) -> Tensor:
        return relu(x)

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        return {}

    def named_buffers(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {}

    def stats(self, h: int, w: int) -> tuple[int, int, int, int]:
        return 0, self.channels * h * w, h, w


class Sequential:
    def __init__(self, layers: Sequence = ()):
        self.layers = list(layers)

    def __call__(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return x

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, layer in enumerate(self.layers):
            out.update(layer.named_parameters(f"{prefix}{i}."))
        return out

    def named_buffers(self, prefix: str = "") -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for i, layer in enumerate(self.layers):
            out.update(layer.named_buffers(f"{prefix}{i}."))
        return out

    def stats(self, h: int, w: int) -> tuple[int, int, int, int]:
        params = flops = 0
        for layer in self.layers:
            p, f, h, w = layer.stats(h, w)
            params += p
            flops += f
        return params, flops, h, w


def _bn_params(state: BatchNormState, prefix: str) -> dict[str, Tensor]:
    if not state.affine:
        return {}
    return {prefix + "gamma": state.gamma, prefix + "beta": state.beta}


def _bn_buffers(state: BatchNormState, prefix: str) -> dict[str, np.ndarray]:
    return {prefix + "running_mean": state.running_mean, prefix + "running_var": state.running_var}


def _bn_states(obj) -> list[BatchNormState]:
    if isinstance(obj, BatchNorm2d):
        return [obj.state]
    if isinstance(obj, Sequential):
        return [s for layer in obj.layers for s in _bn_states(layer)]
    return []


# -- backbone ------------------------------------------------------------------------


@dataclass
class BackboneConfig:
    """Conv(3x3)-BN-ReLU stages; the product of strides is the down stride."""

    widths: tuple[int, ...] = (8, 16, 32, 64)
    strides: tuple[int, ...] = (2, 2, 2, 1)
    in_channels: int = 3

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.strides = tuple(int(s) for s in self.strides)
        if len(self.widths) != len(self.strides):
            raise ValueError("backbone widths and strides must have equal length")

    @property
    def down_stride(self) -> int:
        return int(np.prod(self.strides)) if self.strides else 1

    @property
    def out_channels(self) -> int:
        return self.widths[-1] if self.widths else self.in_channels


class Backbone(Sequential):
    def __init__(self, config: BackboneConfig, rng: np.random.Generator, dtype=np.float64):
        layers = []
        cin = config.in_channels
        for width, stride in zip(config.widths, config.strides):
            layers += [Conv2d(cin, width, 3, stride, rng=rng, dtype=dtype), BatchNorm2d(width, dtype=dtype), ReLU(width)]
            cin = width
        super().__init__(layers)
        self.config = config

    @property
    def down_stride(self) -> int:
        return self.config.down_stride

    @property
    def out_channels(self) -> int:
        return self.config.out_channels


def backbone_forward(backbone: Backbone, images: Tensor) -> Tensor:
    """Run the backbone; input height and width must be multiples of the down stride."""
    if images.ndim != 4:
        raise DimensionError(f"images must be N x C x h x w, got shape {images.shape}")
    r = backbone.down_stride
    h, w = images.shape[2:]
    if h % r or w % r:
        raise DimensionError(f"input spatial size {h}x{w} (axes 2,3) is not divisible by down stride {r}")
    if images.shape[1] != backbone.config.in_channels:
        raise DimensionError(f"images axis 1 has {images.shape[1]} channels, backbone expects {backbone.config.in_channels}")
    return backbone(images)


# -- heads ---------------------------------------------------------------------------


@dataclass
class DtmOutput:
    logits: Tensor
    heatmaps_gap: Tensor | None
    heatmaps_gmp: Tensor | None
    gmp_argmax: np.ndarray | None
    gap_indices: list[int]
    gmp_indices: list[int]

    def heatmaps(self, indices: Sequence[int]) -> Tensor:
        """Heatmaps for the given schema indices, in that order, as one N x len x H x W tensor."""
        parts, pos = [], {}
        for hm, idx in ((self.heatmaps_gap, self.gap_indices), (self.heatmaps_gmp, self.gmp_indices)):
            if hm is not None:
                for k, j in enumerate(idx):
                    pos[j] = sum(p.shape[1] for p in parts) + k
                parts.append(hm)
        stacked = parts[0] if len(parts) == 1 else concat(parts, axis=1)
        return take(stacked, [pos[j] for j in indices], axis=1)


class DtmHead:
    """Templates plus per-attribute spatial batch norm, split into GAP and GMP groups."""

    def __init__(self, channels: int, gap_indices: Sequence[int], gmp_indices: Sequence[int],
                 rng: np.random.Generator, use_bn: bool = True, bn_affine: bool = True, dtype=np.float64):
        self.channels = channels
        self.gap_indices = list(gap_indices)
        self.gmp_indices = list(gmp_indices)
        self.use_bn = use_bn
        std = np.sqrt(1.0 / channels)
        self.templates_gap = Tensor(rng.normal(0, std, (len(self.gap_indices), channels, 1, 1)).astype(dtype), requires_grad=True)
        self.templates_gmp = Tensor(rng.normal(0, std, (len(self.gmp_indices), channels, 1, 1)).astype(dtype), requires_grad=True)
        self.bn_gap = BatchNormState(max(len(self.gap_indices), 1), affine=bn_affine, dtype=dtype)
        self.bn_gmp = BatchNormState(max(len(self.gmp_indices), 1), affine=bn_affine, dtype=dtype)
        order = self.gap_indices + self.gmp_indices
        if sorted(order) != list(range(len(order))):
            raise ValueError("gap and gmp indices must partition 0..J-1")
        self.restore = list(np.argsort(order))

    @property
    def J(self) -> int:
        return len(self.restore)

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        if self.gap_indices:
            out[prefix + "templates_gap"] = self.templates_gap
            if self.use_bn:
                out.update(_bn_params(self.bn_gap, prefix + "bn_gap."))
        if self.gmp_indices:
            out[prefix + "templates_gmp"] = self.templates_gmp
            if self.use_bn:
                out.update(_bn_params(self.bn_gmp, prefix + "bn_gmp."))
        return out

    def named_buffers(self, prefix: str = "") -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        if self.use_bn and self.gap_indices:
            out.update(_bn_buffers(self.bn_gap, prefix + "bn_gap."))
        if self.use_bn and self.gmp_indices:
            out.update(_bn_buffers(self.bn_gmp, prefix + "bn_gmp."))
        return out

    def bn_states(self) -> list[BatchNormState]:
        return [self.bn_gap, self.bn_gmp]

    def stats(self, h: int, w: int) -> tuple[int, int, int, int]:
        params = flops = 0
        for n in (len(self.gap_indices), len(self.gmp_indices)):
            if n == 0:
                continue
            params += n * self.channels
            flops += 2 * self.channels * n * h * w
            if self.use_bn:
                params += 2 * n if self.bn_gap.affine else 0
                flops += 2 * n * h * w
            flops += n * h * w
        return params, flops, 1, 1


def forward_dtm(head: DtmHead, F: Tensor) -> DtmOutput:
    if F.ndim != 4 or F.shape[1] != head.channels:
        raise DimensionError(f"feature map axis 1 must have {head.channels} channels, got shape {F.shape}")
    pooled, hm_gap, hm_gmp, argmax = [], None, None, None
    if head.gap_indices:
        hm_gap = conv2d(F, head.templates_gap)
        if head.use_bn:
            hm_gap = batchnorm(hm_gap, head.bn_gap)
        pooled.append(gap(hm_gap))
    if head.gmp_indices:
        hm_gmp = conv2d(F, head.templates_gmp)
        if head.use_bn:
            hm_gmp = batchnorm(hm_gmp, head.bn_gmp)
        p, argmax = gmp(hm_gmp)
        pooled.append(p)
    logits = pooled[0] if len(pooled) == 1 else concat(pooled, axis=1)
    if head.restore != list(range(head.J)):
        logits = take(logits, head.restore, axis=1)
    return DtmOutput(logits, hm_gap, hm_gmp, argmax, head.gap_indices, head.gmp_indices)


class FcBaseline:
    """``BN_vector(W_fc . GAP(F))``."""

    def __init__(self, channels: int, num_attributes: int, rng: np.random.Generator,
                 use_bn: bool = True, bn_affine: bool = True, dtype=np.float64):
        self.channels = channels
        self.W_fc = Tensor(rng.normal(0, np.sqrt(1.0 / channels), (num_attributes, channels)).astype(dtype), requires_grad=True)
        self.use_bn = use_bn
        self.bn = BatchNormState(num_attributes, variant="vector", affine=bn_affine, dtype=dtype)

    @property
    def J(self) -> int:
        return self.W_fc.shape[0]

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = {prefix + "W_fc": self.W_fc}
        if self.use_bn:
            out.update(_bn_params(self.bn, prefix + "bn."))
        return out

    def named_buffers(self, prefix: str = "") -> dict[str, np.ndarray]:
        return _bn_buffers(self.bn, prefix + "bn.") if self.use_bn else {}

    def bn_states(self) -> list[BatchNormState]:
        return [self.bn]

    def stats(self, h: int, w: int) -> tuple[int, int, int, int]:
        j = self.J
        params = j * self.channels + (2 * j if self.use_bn and self.bn.affine else 0)
        flops = self.channels * h * w + 2 * self.channels * j + (2 * j if self.use_bn else 0)
        return params, flops, 1, 1


def forward_fc_baseline(head: FcBaseline, F: Tensor) -> Tensor:
    if F.ndim != 4 or F.shape[1] != head.channels:
        raise DimensionError(f"feature map axis 1 must have {head.channels} channels, got shape {F.shape}")
    z = gap(F) @ head.W_fc.transpose()
    return batchnorm(z, head.bn) if head.use_bn else z


# -- full model ------------------------------------------------------------------------


@dataclass
class ModelConfig:
    head_mode: str = "dtm_mixed"
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    head_bn: bool = True
    bn_affine: bool = True
    dtype: str = "float32"

    def __post_init__(self):
        if self.head_mode not in HEAD_MODES:
            raise ValueError(f"head_mode must be one of {HEAD_MODES}, got {self.head_mode!r}")
        if isinstance(self.backbone, dict):
            self.backbone = BackboneConfig(**self.backbone)


def pooling_split(schema: AttributeSchema, head_mode: str) -> tuple[list[int], list[int]]:
    """Which schema indices go to GAP and which to GMP under ``head_mode``."""
    all_idx = list(range(schema.J))
    if head_mode == "dtm_gap":
        return all_idx, []
    if head_mode == "dtm_gmp":
        return [], all_idx
    if head_mode == "dtm_mixed":
        return schema.global_indices, schema.local_indices
    raise ValueError(f"{head_mode!r} has no template pooling split")


class DtmModel:
    """Backbone plus either a DTM head or the FC+BN baseline head."""

    def __init__(self, schema: AttributeSchema, config: ModelConfig | None = None, seed: int = 0):
        self.schema = schema
        self.config = config or ModelConfig()
        self.seed = seed
        dtype = np.dtype(self.config.dtype)
        rng = np.random.default_rng(seed)
        self.backbone = Backbone(self.config.backbone, rng, dtype=dtype)
        c = self.backbone.out_channels
        if self.config.head_mode == "fc_baseline":
            self.head = FcBaseline(c, schema.J, rng, self.config.head_bn, self.config.bn_affine, dtype)
        else:
            g, m = pooling_split(schema, self.config.head_mode)
            self.head = DtmHead(c, g, m, rng, self.config.head_bn, self.config.bn_affine, dtype)
        self.training = True

    @property
    def dtype(self):
        return np.dtype(self.config.dtype)

    @property
    def down_stride(self) -> int:
        return self.backbone.down_stride

    @property
    def is_dtm(self) -> bool:
        return isinstance(self.head, DtmHead)

    def named_parameters(self) -> dict[str, Tensor]:
        out = self.backbone.named_parameters("backbone.")
        out.update(self.head.named_parameters("head."))
        for name, t in out.items():
            t.name = name
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def named_buffers(self) -> dict[str, np.ndarray]:
        out = self.backbone.named_buffers("backbone.")
        out.update(self.head.named_buffers("head."))
        return out

    def bn_states(self) -> list[BatchNormState]:
        return _bn_states(self.backbone) + self.head.bn_states()

    def train(self) -> "DtmModel":
        self.training = True
        for s in self.bn_states():
            s.mode = "train"
        return self

    def eval(self) -> "DtmModel":
        self.training = False
        for s in self.bn_states():
            s.mode = "eval"
        return self

    def features(self, images: Tensor) -> Tensor:
        return backbone_forward(self.backbone, images)

    def forward(self, images) -> DtmOutput:
        if not isinstance(images, Tensor):
            images = Tensor(np.asarray(images, dtype=self.dtype))
        F = self.features(images)
        if isinstance(self.head, FcBaseline):
            idx = list(range(self.schema.J))
            return DtmOutput(forward_fc_baseline(self.head, F), None, None, None, idx, [])
        return forward_dtm(self.head, F)

    __call__ = forward

    def heatmap_size(self, h: int, w: int) -> tuple[int, int]:
        return h // self.down_stride, w // self.down_stride


def model_stats(model, input_hw: tuple[int, int] = (128, 96)) -> tuple[int, int]:
    """(parameter count, FLOPs per single-image forward) under the module's counting conventions."""
    h, w = input_hw
    if isinstance(model, DtmModel):
        p1, f1, h, w = model.backbone.stats(h, w)
        p2, f2, _, _ = model.head.stats(h, w)
        return p1 + p2, f1 + f2
    params, flops, _, _ = model.stats(h, w)
    return params, flops
