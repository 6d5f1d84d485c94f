"""In-memory dataset container.

Images are kept as uint8 (N, 3, h, w) to keep memory flat; :class:`Sample`
exposes a float view in [0, 1].
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from dtmpar.errors import DimensionError
from dtmpar.schema import NUM_JOINTS, AttributeSchema
from dtmpar.supervision import KeypointSet


@dataclass
class Sample:
    id: str
    image: np.ndarray  # 3 x h x w, float in [0, 1] or uint8
    labels: np.ndarray  # J, {0, 1}
    keypoints: KeypointSet

    def float_image(self) -> np.ndarray:
        if self.image.dtype == np.uint8:
            return self.image.astype(np.float64) / 255.0
        return self.image


@dataclass
class Dataset:
    schema: AttributeSchema
    ids: list[str]
    images: np.ndarray  # N x 3 x h x w uint8
    labels: np.ndarray  # N x J uint8
    keypoints_xy: np.ndarray  # N x 17 x 2 float64
    keypoints_visible: np.ndarray  # N x 17 bool
    warnings: list[str] = field(default_factory=list)

    def __post_init__(self):
        n = len(self.ids)
        if self.images.shape[0] != n or self.labels.shape[0] != n:
            raise DimensionError(f"dataset arrays disagree on N: ids {n}, images {self.images.shape}, labels {self.labels.shape}")
        if self.labels.ndim != 2 or self.labels.shape[1] != self.schema.J:
            raise DimensionError(f"labels must be N x {self.schema.J}, got {self.labels.shape}")
        if self.keypoints_xy.shape != (n, NUM_JOINTS, 2) or self.keypoints_visible.shape != (n, NUM_JOINTS):
            raise DimensionError("keypoint arrays must be N x 17 x 2 and N x 17")

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def image_size(self) -> tuple[int, int]:
        return int(self.images.shape[2]), int(self.images.shape[3])

    def keypoints(self, i: int) -> KeypointSet:
        return KeypointSet(self.keypoints_xy[i], self.keypoints_visible[i])

    def __getitem__(self, i: int) -> Sample:
        return Sample(self.ids[i], self.images[i].astype(np.float64) / 255.0, self.labels[i].copy(), self.keypoints(i))

    def raw_sample(self, i: int) -> Sample:
        return Sample(self.ids[i], self.images[i], self.labels[i], self.keypoints(i))

    def subset(self, indices: Sequence[int]) -> "Dataset":
        idx = np.asarray(indices, dtype=np.intp)
        return Dataset(
            self.schema,
            [self.ids[i] for i in idx],
            self.images[idx],
            self.labels[idx],
            self.keypoints_xy[idx],
            self.keypoints_visible[idx],
        )

    def index_of(self, sample_id: str) -> int:
        return self.ids.index(sample_id)

    @classmethod
    def empty(cls, schema: AttributeSchema, h: int, w: int) -> "Dataset":
        return cls(
            schema,
            [],
            np.zeros((0, 3, h, w), dtype=np.uint8),
            np.zeros((0, schema.J), dtype=np.uint8),
            np.zeros((0, NUM_JOINTS, 2)),
            np.zeros((0, NUM_JOINTS), dtype=bool),
        )

    def equals(self, other: "Dataset") -> bool:
        return (
            self.schema == other.schema
            and self.ids == other.ids
            and np.array_equal(self.images, other.images)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.keypoints_visible, other.keypoints_visible)
            and np.array_equal(self.keypoints_xy, other.keypoints_xy)
        )
