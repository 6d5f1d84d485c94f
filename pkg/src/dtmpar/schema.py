"""Attribute schema and the COCO keypoint vocabulary."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from dtmpar.errors import SchemaMismatchError

COCO_JOINTS: tuple[str, ...] = (
    "nose",
    "left_eye",
    "right_eye",
    "left_ear",
    "right_ear",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hip",
    "right_hip",
    "left_knee",
    "right_knee",
    "left_ankle",
    "right_ankle",
)
NUM_JOINTS = len(COCO_JOINTS)
JOINT_INDEX = {name: i for i, name in enumerate(COCO_JOINTS)}

# index permutation that swaps every left joint with its right twin
FLIP_PERMUTATION: tuple[int, ...] = tuple(
    JOINT_INDEX[n.replace("left_", "right_")] if n.startswith("left_")
    else JOINT_INDEX[n.replace("right_", "left_")] if n.startswith("right_")
    else i
    for i, n in enumerate(COCO_JOINTS)
)

# shorthand groups used when writing keypoint assignments by hand
JOINT_GROUPS: dict[str, tuple[str, ...]] = {
    "eyes": ("left_eye", "right_eye"),
    "ears": ("left_ear", "right_ear"),
    "shoulders": ("left_shoulder", "right_shoulder"),
    "elbows": ("left_elbow", "right_elbow"),
    "wrists": ("left_wrist", "right_wrist"),
    "hands": ("left_wrist", "right_wrist"),
    "hips": ("left_hip", "right_hip"),
    "knees": ("left_knee", "right_knee"),
    "ankles": ("left_ankle", "right_ankle"),
    "feet": ("left_ankle", "right_ankle"),
}


def resolve_joints(names: Iterable[str]) -> tuple[int, ...]:
    """Map joint names (or group shorthands like ``"hands"``) to COCO indices, keeping first-seen order."""
    out: list[int] = []
    for name in names:
        members = JOINT_GROUPS.get(name, (name,))
        for m in members:
            if m not in JOINT_INDEX:
                raise KeyError(f"unknown joint name {m!r}")
            if JOINT_INDEX[m] not in out:
                out.append(JOINT_INDEX[m])
    return tuple(out)


@dataclass(frozen=True)
class Attribute:
    name: str
    is_global: bool
    keypoint_ids: tuple[int, ...] = ()


@dataclass(frozen=True)
class AttributeSchema:
    """Ordered attributes; local ones carry the joints that supervise their heatmaps."""

    attributes: tuple[Attribute, ...]
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        names = [a.name for a in self.attributes]
        if len(set(names)) != len(names):
            dupes = sorted({n for n in names if names.count(n) > 1})
            raise ValueError(f"duplicate attribute names: {dupes}")
        for a in self.attributes:
            if a.is_global and a.keypoint_ids:
                raise ValueError(f"global attribute {a.name!r} must not have keypoints")
            if not a.is_global and not a.keypoint_ids:
                raise ValueError(f"local attribute {a.name!r} needs at least one keypoint")
            for k in a.keypoint_ids:
                if not 0 <= k < NUM_JOINTS:
                    raise ValueError(f"attribute {a.name!r}: joint id {k} out of range")
        object.__setattr__(self, "_index", {n: i for i, n in enumerate(names)})

    @classmethod
    def from_assignment(cls, names: Sequence[str], assignment: Mapping[str, Sequence[str]]) -> "AttributeSchema":
        """Build from attribute order plus a name -> joint-names map (empty list = global)."""
        missing = [n for n in names if n not in assignment]
        extra = [n for n in assignment if n not in names]
        if missing or extra:
            raise SchemaMismatchError(f"assignment does not match attributes: missing {missing}, unknown {extra}")
        attrs = []
        for n in names:
            joints = resolve_joints(assignment[n])
            attrs.append(Attribute(n, is_global=not joints, keypoint_ids=joints))
        return cls(tuple(attrs))

    def to_assignment(self) -> dict[str, list[str]]:
        return {a.name: [COCO_JOINTS[k] for k in a.keypoint_ids] for a in self.attributes}

    @property
    def names(self) -> list[str]:
        return [a.name for a in self.attributes]

    @property
    def J(self) -> int:
        return len(self.attributes)

    @property
    def global_indices(self) -> list[int]:
        return [i for i, a in enumerate(self.attributes) if a.is_global]

    @property
    def local_indices(self) -> list[int]:
        return [i for i, a in enumerate(self.attributes) if not a.is_global]

    @property
    def J_g(self) -> int:
        return len(self.global_indices)

    @property
    def J_l(self) -> int:
        return len(self.local_indices)

    def index(self, name: str) -> int:
        return self._index[name]

    def __len__(self) -> int:
        return self.J

    def permuted(self, order: Sequence[int]) -> "AttributeSchema":
        return AttributeSchema(tuple(self.attributes[i] for i in order))

    def check_same(self, other: "AttributeSchema") -> None:
        """Raise :class:`SchemaMismatchError` listing differing attributes."""
        if self == other:
            return
        mine, theirs = self.names, other.names
        diffs = [f"only in first: {n}" for n in mine if n not in theirs]
        diffs += [f"only in second: {n}" for n in theirs if n not in mine]
        for i, (a, b) in enumerate(zip(self.attributes, other.attributes)):
            if a != b and a.name in theirs and b.name in mine:
                diffs.append(f"position {i}: {a} vs {b}")
        raise SchemaMismatchError("schema mismatch: " + "; ".join(diffs or ["attribute order differs"]))


def default_schema() -> AttributeSchema:
    """Twelve synthetic attributes, 3 global and 9 local, with hand-assigned joints."""
    assignment = {
        "female": [],
        "age_over_60": [],
        "body_heavy": [],
        "glasses": ["nose", "eyes", "ears"],
        "hat": ["nose", "eyes", "ears"],
        "calling": ["hands", "ears"],
        "jacket": ["shoulders", "elbows", "wrists", "hips"],
        "short_sleeve": ["shoulders", "elbows"],
        "backpack": ["shoulders", "hips"],
        "handbag": ["hands"],
        "trousers": ["hips", "knees", "feet"],
        "sport_shoes": ["feet"],
    }
    return AttributeSchema.from_assignment(list(assignment), assignment)
