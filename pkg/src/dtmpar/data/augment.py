"""Geometry-aware augmentation: horizontal mirror and padded random crop.

Keypoints are transformed together with the pixels. Mirroring also swaps
left/right joints so that, say, the left wrist stays the subject's left
wrist after the flip.
"""
from __future__ import annotations

import numpy as np

from dtmpar.data.dataset import Sample
from dtmpar.schema import FLIP_PERMUTATION
from dtmpar.supervision import KeypointSet

DEFAULT_PAD = 10
_FLIP = np.asarray(FLIP_PERMUTATION)


def mirror(image: np.ndarray, keypoints: KeypointSet) -> tuple[np.ndarray, KeypointSet]:
    w = image.shape[-1]
    xy = keypoints.xy.copy()
    xy[:, 0] = w - 1 - xy[:, 0]
    return image[..., ::-1].copy(), KeypointSet(xy[_FLIP], keypoints.visible[_FLIP])


def crop(image: np.ndarray, keypoints: KeypointSet, pad: int, oy: int, ox: int) -> tuple[np.ndarray, KeypointSet]:
    """Edge-pad by ``pad`` pixels and take the original-size window at offset (oy, ox)."""
    if not (0 <= oy <= 2 * pad and 0 <= ox <= 2 * pad):
        raise ValueError(f"crop offset ({oy}, {ox}) outside [0, {2 * pad}]")
    _, h, w = image.shape
    if pad:
        image = np.pad(image, ((0, 0), (pad, pad), (pad, pad)), mode="edge")
    out = image[:, oy : oy + h, ox : ox + w].copy()
    xy = keypoints.xy + [pad - ox, pad - oy]
    return out, KeypointSet(xy, keypoints.visible).clip_to(h, w)


def augment(sample: Sample, rng: np.random.Generator, pad: int = DEFAULT_PAD, mirror_prob: float = 0.5) -> Sample:
    """Random mirror then random crop; labels pass through untouched."""
    image, kp = sample.image, sample.keypoints
    if rng.uniform() < mirror_prob:
        image, kp = mirror(image, kp)
    oy, ox = rng.integers(0, 2 * pad + 1, size=2)
    image, kp = crop(image, kp, pad, int(oy), int(ox))
    return Sample(sample.id, image, sample.labels, kp)
