"""Keypoint-grounded synthetic pedestrians.

Each image holds a jittered 17-joint stick figure on a noisy, cluttered
background.  A positive local attribute paints a disc of its own colour
centred on one of its assigned joints; global attributes change image-wide
statistics (a red tint, a blue tint, limb thickness).  Keypoint visibility
flags simulate pose-estimator misses; the pixels are drawn regardless.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from dtmpar.data.dataset import Dataset
from dtmpar.errors import DimensionError
from dtmpar.schema import COCO_JOINTS, JOINT_INDEX, NUM_JOINTS, AttributeSchema, default_schema

# canonical joint layout as fractions of (width, height), subject facing the camera
CANONICAL_POSE = {
    "nose": (0.50, 0.12),
    "left_eye": (0.55, 0.10),
    "right_eye": (0.45, 0.10),
    "left_ear": (0.59, 0.12),
    "right_ear": (0.41, 0.12),
    "left_shoulder": (0.65, 0.25),
    "right_shoulder": (0.35, 0.25),
    "left_elbow": (0.71, 0.39),
    "right_elbow": (0.29, 0.39),
    "left_wrist": (0.73, 0.53),
    "right_wrist": (0.27, 0.53),
    "left_hip": (0.60, 0.55),
    "right_hip": (0.40, 0.55),
    "left_knee": (0.61, 0.73),
    "right_knee": (0.39, 0.73),
    "left_ankle": (0.61, 0.90),
    "right_ankle": (0.39, 0.90),
}

LIMBS = [
    ("left_shoulder", "right_shoulder"),
    ("left_shoulder", "left_elbow"),
    ("left_elbow", "left_wrist"),
    ("right_shoulder", "right_elbow"),
    ("right_elbow", "right_wrist"),
    ("left_shoulder", "left_hip"),
    ("right_shoulder", "right_hip"),
    ("left_hip", "right_hip"),
    ("left_hip", "left_knee"),
    ("left_knee", "left_ankle"),
    ("right_hip", "right_knee"),
    ("right_knee", "right_ankle"),
]

# visually distinct fills for local attributes, by position among the local attributes
BLOB_COLOURS = [
    (1.0, 1.0, 0.0),
    (1.0, 0.0, 0.0),
    (0.0, 1.0, 0.0),
    (0.0, 0.0, 1.0),
    (1.0, 0.0, 1.0),
    (0.0, 1.0, 1.0),
    (1.0, 0.5, 0.0),
    (0.5, 0.0, 1.0),
    (1.0, 1.0, 1.0),
    (0.0, 0.5, 0.25),
]

DEFAULT_POSITIVE_RATES = (0.5, 0.3, 0.4, 0.3, 0.25, 0.2, 0.45, 0.35, 0.3, 0.3, 0.5, 0.4)


@dataclass
class SynthConfig:
    height: int = 128
    width: int = 96
    n_train: int = 4000
    n_val: int = 1000
    n_test: int = 1000
    assignment: dict = field(default_factory=lambda: default_schema().to_assignment())
    positive_rates: tuple[float, ...] = DEFAULT_POSITIVE_RATES
    blob_radius: int = 4
    skeleton_jitter: float = 3.0
    noise: float = 0.04
    clutter: int = 3
    occlusion_prob: float = 0.1
    distractor_prob: float = 0.0
    tint: float = 0.15
    down_stride: int = 8
    seed: int = 0

    def __post_init__(self):
        self.positive_rates = tuple(float(p) for p in self.positive_rates)
        if self.height % self.down_stride or self.width % self.down_stride:
            raise DimensionError(
                f"synthetic image size {self.height}x{self.width} is not divisible by down stride {self.down_stride}"
            )
        if len(self.positive_rates) != len(self.assignment):
            raise ValueError(f"{len(self.positive_rates)} positive rates for {len(self.assignment)} attributes")
        if not all(0.0 < p < 1.0 for p in self.positive_rates):
            raise ValueError("positive rates must lie strictly between 0 and 1")
        if not 0.0 <= self.occlusion_prob < 1.0 or not 0.0 <= self.distractor_prob <= 1.0:
            raise ValueError("probabilities out of range")
        schema = self.schema
        if schema.J_g > 3:
            raise ValueError("the renderer encodes at most 3 global attributes (red tint, blue tint, limb width)")
        if schema.J_l > len(BLOB_COLOURS):
            raise ValueError(f"the renderer has {len(BLOB_COLOURS)} blob colours, schema has {schema.J_l} local attributes")

    @property
    def schema(self) -> AttributeSchema:
        return AttributeSchema.from_assignment(list(self.assignment), self.assignment)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["positive_rates"] = list(self.positive_rates)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        return cls(**d)


def _disc(canvas: np.ndarray, yy: np.ndarray, xx: np.ndarray, cx: float, cy: float, radius: float, colour) -> None:
    mask = (xx - cx) ** 2 + (yy - cy) ** 2 <= radius * radius
    canvas[:, mask] = np.asarray(colour, dtype=canvas.dtype)[:, None]


def _segment(canvas, yy, xx, p, q, half_width: float, colour) -> None:
    (x0, y0), (x1, y1) = p, q
    dx, dy = x1 - x0, y1 - y0
    length2 = dx * dx + dy * dy
    t = np.clip(((xx - x0) * dx + (yy - y0) * dy) / max(length2, 1e-9), 0.0, 1.0)
    d2 = (xx - (x0 + t * dx)) ** 2 + (yy - (y0 + t * dy)) ** 2
    canvas[:, d2 <= half_width * half_width] = np.asarray(colour, dtype=canvas.dtype)[:, None]


def _pose(config: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    h, w = config.height, config.width
    scale = rng.uniform(0.85, 1.0)
    cx = w / 2 + rng.uniform(-0.06, 0.06) * w
    cy = h / 2 + rng.uniform(-0.03, 0.03) * h
    xy = np.zeros((NUM_JOINTS, 2))
    for name, (fx, fy) in CANONICAL_POSE.items():
        xy[JOINT_INDEX[name]] = (cx + (fx - 0.5) * w * scale, cy + (fy - 0.5) * h * scale)
    xy += rng.uniform(-config.skeleton_jitter, config.skeleton_jitter, size=xy.shape)
    m = config.blob_radius
    xy[:, 0] = np.clip(np.round(xy[:, 0]), m, w - 1 - m)
    xy[:, 1] = np.clip(np.round(xy[:, 1]), m, h - 1 - m)
    return xy


def _pick_joint(candidates: Sequence[int], xy: np.ndarray, placed: list[tuple[float, float]], min_dist: float) -> int:
    """First candidate clear of every placed blob, else the one farthest from them."""
    best, best_d = candidates[0], -1.0
    for k in candidates:
        d = min((np.hypot(xy[k, 0] - px, xy[k, 1] - py) for px, py in placed), default=np.inf)
        if d >= min_dist:
            return k
        if d > best_d:
            best, best_d = k, d
    return best


def render_sample(config: SynthConfig, schema: AttributeSchema, labels: np.ndarray, rng: np.random.Generator):
    """Draw one image; returns (uint8 image 3xhxw, joint xy, joint visibility, blob centres by attribute)."""
    h, w = config.height, config.width
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    base = rng.uniform(0.3, 0.55)
    img = np.full((3, h, w), base)
    for _ in range(rng.integers(0, config.clutter + 1)):
        y0, x0 = rng.integers(0, h - 8), rng.integers(0, w - 8)
        y1, x1 = y0 + rng.integers(6, h // 3), x0 + rng.integers(6, w // 3)
        img[:, y0:y1, x0:x1] = base + rng.uniform(-0.15, 0.15)

    xy = _pose(config, rng)
    visible = rng.uniform(size=NUM_JOINTS) >= config.occlusion_prob

    global_idx = schema.global_indices
    heavy = len(global_idx) > 2 and labels[global_idx[2]] > 0
    limb_colour = (0.12, 0.12, 0.12)
    half = 2.5 if heavy else 1.0
    for a, b in LIMBS:
        _segment(img, yy, xx, xy[JOINT_INDEX[a]], xy[JOINT_INDEX[b]], half, limb_colour)
    nose = xy[JOINT_INDEX["nose"]]
    _disc(img, yy, xx, nose[0], nose[1] + 1, 0.07 * w, (0.8, 0.65, 0.5))

    r = config.blob_radius
    placed: list[tuple[float, float]] = []
    centres: dict[int, int] = {}
    local_idx = schema.local_indices
    for slot, j in enumerate(local_idx):
        if not labels[j]:
            continue
        joints = list(schema.attributes[j].keypoint_ids)
        candidates = [k for k in joints if visible[k]]
        if not candidates:
            candidates = joints
        k = _pick_joint([joints[i] for i in rng.permutation(len(joints)) if joints[i] in candidates], xy, placed, 2 * r + 1)
        crowded = any(np.hypot(xy[k, 0] - px, xy[k, 1] - py) < 2 * r + 1 for px, py in placed)
        visible[k] = True
        centres[j] = k
        placed.append((xy[k, 0], xy[k, 1]))
        # a shrunken disc leaves the blob underneath visible as a ring
        _disc(img, yy, xx, xy[k, 0], xy[k, 1], max(1, r // 2) if crowded else r, BLOB_COLOURS[slot])

    if local_idx and rng.uniform() < config.distractor_prob:
        negatives = [s for s, j in enumerate(local_idx) if not labels[j]]
        if negatives:
            slot = negatives[rng.integers(len(negatives))]
            side = rng.integers(2)
            dx = rng.uniform(r, 0.14 * w)
            cx = dx if side == 0 else w - 1 - dx
            cy = rng.uniform(r, h - 1 - r)
            _disc(img, yy, xx, cx, cy, r, BLOB_COLOURS[slot])

    img += rng.normal(0.0, config.noise, size=img.shape)
    if len(global_idx) > 0 and labels[global_idx[0]]:
        img[0] += config.tint
    if len(global_idx) > 1 and labels[global_idx[1]]:
        img[2] += config.tint
    out = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    return out, xy, visible, centres


def gen_synthetic(config: SynthConfig) -> dict[str, Dataset]:
    """Generate train/val/test splits. Bitwise deterministic for a given config."""
    schema = config.schema
    rng = np.random.default_rng(config.seed)
    sizes = {"train": config.n_train, "val": config.n_val, "test": config.n_test}
    total = sum(sizes.values())
    rates = np.asarray(config.positive_rates)
    labels = (rng.uniform(size=(total, schema.J)) < rates).astype(np.uint8)

    h, w = config.height, config.width
    images = np.zeros((total, 3, h, w), dtype=np.uint8)
    kp_xy = np.zeros((total, NUM_JOINTS, 2))
    kp_vis = np.zeros((total, NUM_JOINTS), dtype=bool)
    for i in range(total):
        images[i], kp_xy[i], kp_vis[i], _ = render_sample(config, schema, labels[i], rng)

    ids = [f"s{i:06d}" for i in range(total)]
    out, start = {}, 0
    for name, n in sizes.items():
        sl = slice(start, start + n)
        out[name] = Dataset(schema, ids[sl], images[sl], labels[sl], kp_xy[sl], kp_vis[sl])
        start += n
    return out


def blob_colour(schema: AttributeSchema, attribute_index: int) -> tuple[float, float, float]:
    slot = schema.local_indices.index(attribute_index)
    return BLOB_COLOURS[slot]


__all__ = ["SynthConfig", "gen_synthetic", "render_sample", "blob_colour", "COCO_JOINTS", "LIMBS"]
