"""Training objectives.

All losses take pre-sigmoid logits and apply the logistic function exactly
once, inside the loss, through ``softplus``:

    -log(sigmoid(z))     = softplus(-z)
    -log(1 - sigmoid(z)) = softplus(z)

Classification uses a positive-ratio weighted cross-entropy. The heatmap
loss supervises local-attribute heatmaps with pose keypoints: a positive
sample is scored only at its attribute's keypoint cells, a negative sample
over every cell.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from dtmpar.core import Tensor, softplus, stable_sigmoid
from dtmpar.errors import DimensionError, FormatError, NonFiniteError, SchemaMismatchError
from dtmpar.schema import COCO_JOINTS, NUM_JOINTS, AttributeSchema, JOINT_GROUPS

RATIO_CLAMP = 1e-4


@dataclass
class KeypointSet:
    """17 COCO joints in input-image pixels; ``visible`` is a boolean mask."""

    xy: np.ndarray  # (17, 2) float, columns x, y
    visible: np.ndarray  # (17,) bool

    def __post_init__(self):
        self.xy = np.asarray(self.xy, dtype=np.float64).reshape(NUM_JOINTS, 2)
        self.visible = np.asarray(self.visible, dtype=bool).reshape(NUM_JOINTS)

    @classmethod
    def invisible(cls) -> "KeypointSet":
        return cls(np.zeros((NUM_JOINTS, 2)), np.zeros(NUM_JOINTS, dtype=bool))

    @classmethod
    def from_triples(cls, triples) -> "KeypointSet":
        arr = np.asarray(triples, dtype=np.float64).reshape(NUM_JOINTS, 3)
        return cls(arr[:, :2], arr[:, 2] > 0)

    def to_triples(self) -> np.ndarray:
        return np.column_stack([self.xy, self.visible.astype(np.float64)])

    def clip_to(self, h: int, w: int) -> "KeypointSet":
        """Mark joints outside [0, w) x [0, h) invisible."""
        x, y = self.xy[:, 0], self.xy[:, 1]
        inside = (x >= 0) & (x < w) & (y >= 0) & (y < h)
        return KeypointSet(self.xy.copy(), self.visible & inside)

    def __eq__(self, other) -> bool:
        if not isinstance(other, KeypointSet):
            return NotImplemented
        return np.array_equal(self.visible, other.visible) and np.array_equal(self.xy[self.visible], other.xy[other.visible])


@dataclass
class LossWeights:
    """alpha weights the heatmap loss, beta the classification loss; lam tunes the ratio weights."""

    positive_ratios: np.ndarray
    alpha: float = 1.0
    beta: float = 1.0
    lam: float = 1.0

    def __post_init__(self):
        self.positive_ratios = np.clip(np.asarray(self.positive_ratios, dtype=np.float64), RATIO_CLAMP, 1 - RATIO_CLAMP)
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("loss weights alpha and beta must be non-negative")
        if self.lam <= 0:
            raise ValueError("lambda must be positive")

    def class_weights(self, labels: np.ndarray) -> np.ndarray:
        """Per-element weights: exp((1-p)/lam^2) where y=1, exp(p/lam^2) where y=0."""
        p = self.positive_ratios
        l2 = self.lam**2
        return np.where(labels > 0, np.exp((1.0 - p) / l2), np.exp(p / l2))


def positive_ratios(labels: np.ndarray) -> np.ndarray:
    """Fraction of positives per attribute, clamped to [1e-4, 1 - 1e-4]."""
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise DimensionError(f"labels must be N x J, got shape {labels.shape}")
    if labels.shape[0] == 0:
        raise ValueError("positive_ratios needs at least one sample")
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be binary")
    p = (labels == 1).sum(axis=0) / labels.shape[0]
    return np.clip(p, RATIO_CLAMP, 1 - RATIO_CLAMP)


def wce_loss(logits: Tensor, labels: np.ndarray, weights: LossWeights) -> Tensor:
    """Positive-ratio weighted sigmoid cross-entropy, averaged over samples and summed over attributes."""
    labels = np.asarray(labels)
    if logits.shape != labels.shape:
        raise DimensionError(f"wce_loss: logits {logits.shape} vs labels {labels.shape}")
    if logits.shape[1] != weights.positive_ratios.shape[0]:
        raise DimensionError(f"wce_loss: {logits.shape[1]} logit columns vs {weights.positive_ratios.shape[0]} ratios")
    z = logits.data
    if not np.all(np.isfinite(z)):
        raise NonFiniteError("wce_loss received non-finite logits")
    n = z.shape[0]
    y = (labels > 0).astype(z.dtype)
    w = weights.class_weights(labels).astype(z.dtype)
    per = np.where(y > 0, softplus(-z), softplus(z))
    value = np.asarray((w * per).sum() / n, dtype=z.dtype)
    grad = w * (stable_sigmoid(z) - y) / n

    return Tensor._from_op(value, (logits,), lambda g: logits._accumulate(g * grad))


# -- keypoint geometry -----------------------------------------------------------------


def map_keypoint(x: float, y: float, r: int) -> tuple[int, int]:
    """Image pixel -> (col, row) heatmap cell by floor division with the down stride."""
    return int(np.floor(x / r)), int(np.floor(y / r))


def awk_targets(schema: AttributeSchema, keypoints: KeypointSet, r: int, heatmap_dims: tuple[int, int]) -> list[list[int]]:
    """Flat target cells for each local attribute, in ``schema.local_indices`` order.

    Only visible joints count; duplicates that land on the same cell collapse.
    """
    H, W = heatmap_dims
    out: list[list[int]] = []
    for j in schema.local_indices:
        cells: list[int] = []
        for k in schema.attributes[j].keypoint_ids:
            if not keypoints.visible[k]:
                continue
            col, row = map_keypoint(keypoints.xy[k, 0], keypoints.xy[k, 1], r)
            if not (0 <= col < W and 0 <= row < H):
                continue
            cell = row * W + col
            if cell not in cells:
                cells.append(cell)
        out.append(cells)
    return out


def awk_masks(labels: np.ndarray, targets: Sequence[Sequence[Sequence[int]]], S: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-cell weights for the positive and negative branches, each N x J_l x S.

    A positive sample spreads weight 1/K over its K target cells (nothing if
    K = 0); a negative sample spreads 1/S over all cells.
    """
    labels = np.asarray(labels)
    n, jl = labels.shape
    if len(targets) != n or any(len(t) != jl for t in targets):
        raise DimensionError(f"awk targets must be {n} x {jl} lists of cells")
    pos = np.zeros((n, jl, S))
    neg = np.zeros((n, jl, S))
    for i in range(n):
        for j in range(jl):
            if labels[i, j] > 0:
                cells = targets[i][j]
                if cells:
                    pos[i, j, list(cells)] = 1.0 / len(cells)
            else:
                neg[i, j, :] = 1.0 / S
    return pos, neg


def awk_loss(heatmaps: Tensor, labels: np.ndarray, targets: Sequence[Sequence[Sequence[int]]]) -> Tensor:
    """Keypoint-guided heatmap loss over N x J_l x H x W logits.

    ``labels`` is N x J_l (local attributes only, same order as the heatmap
    channels); ``targets[i][j]`` lists flat cell indices for sample ``i``.
    """
    labels = np.asarray(labels)
    if heatmaps.ndim != 4:
        raise DimensionError(f"awk_loss heatmaps must be N x J_l x H x W, got {heatmaps.shape}")
    n, jl, H, W = heatmaps.shape
    if labels.shape != (n, jl):
        raise DimensionError(f"awk_loss: heatmaps {heatmaps.shape} vs labels {labels.shape} (axes 0,1)")
    S = H * W
    pos, neg = awk_masks(labels, targets, S)
    pos = pos.astype(heatmaps.dtype)
    neg = neg.astype(heatmaps.dtype)
    z = heatmaps.data.reshape(n, jl, S)
    value = np.asarray(((pos * softplus(-z)).sum() + (neg * softplus(z)).sum()) / n, dtype=heatmaps.dtype)
    s = stable_sigmoid(z)
    grad = ((pos * (s - 1.0) + neg * s) / n).reshape(heatmaps.shape)

    return Tensor._from_op(value, (heatmaps,), lambda g: heatmaps._accumulate(g * grad))


def total_loss(l_awk, l_wce, alpha: float = 1.0, beta: float = 1.0):
    """alpha * L_awk + beta * L_wce (works on Tensors or floats)."""
    if alpha < 0 or beta < 0:
        raise ValueError("alpha and beta must be non-negative")
    return l_awk * alpha + l_wce * beta


# -- assignment file ---------------------------------------------------------------------


def load_assignment(path: str | Path, schema: AttributeSchema | None = None) -> dict[str, list[str]]:
    """Read a JSON object mapping attribute name -> list of COCO joint names.

    Group shorthands (``"hands"``, ``"feet"``, ...) are accepted. When
    ``schema`` is given the file must describe exactly that schema.
    """
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"invalid JSON: {exc.msg}", path, exc.lineno) from None
    if not isinstance(raw, dict) or not all(isinstance(v, list) for v in raw.values()):
        raise FormatError("assignment must be an object of name -> list of joint names", path)
    known = set(COCO_JOINTS) | set(JOINT_GROUPS)
    for name, joints in raw.items():
        bad = [j for j in joints if j not in known]
        if bad:
            raise FormatError(f"attribute {name!r}: unknown joints {bad}", path)
    if schema is not None:
        rebuilt = AttributeSchema.from_assignment(schema.names, raw)
        schema.check_same(rebuilt)
    return raw


def save_assignment(path: str | Path, schema: AttributeSchema) -> None:
    Path(path).write_text(json.dumps(schema.to_assignment(), indent=2) + "\n", encoding="utf-8")


def check_assignment_covers(schema: AttributeSchema, names: Sequence[str]) -> None:
    if list(names) != schema.names:
        raise SchemaMismatchError(f"annotation attributes {list(names)} differ from schema {schema.names}")
