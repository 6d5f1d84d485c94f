"""Training configuration, read from and written to JSON."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from dtmpar.data.synthetic import SynthConfig
from dtmpar.model import HEAD_MODES, BackboneConfig, ModelConfig


@dataclass
class TrainConfig:
    """Everything a training run depends on.

    ``data`` points at a dataset root on disk; when it is ``None`` the run
    generates the synthetic dataset described by ``synth`` in memory.
    """

    data: str | None = None
    synth: dict = field(default_factory=dict)
    head_mode: str = "dtm_mixed"
    awk: bool = True
    alpha: float = 1.0
    beta: float = 1.0
    lam: float = 1.0
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 64
    epochs: int = 20
    seed: int = 0
    lr_decay: float = 0.1
    milestones: tuple[float, ...] = (0.6, 0.85)
    threshold: float = 0.5
    augment: bool = True
    crop_pad: int = 10
    backbone_widths: tuple[int, ...] = (8, 16, 32, 64)
    backbone_strides: tuple[int, ...] = (2, 2, 2, 1)
    head_bn: bool = True
    bn_affine: bool = True
    dtype: str = "float32"
    eval_batch_size: int = 250

    def __post_init__(self):
        self.milestones = tuple(float(m) for m in self.milestones)
        self.backbone_widths = tuple(int(w) for w in self.backbone_widths)
        self.backbone_strides = tuple(int(s) for s in self.backbone_strides)
        if self.head_mode not in HEAD_MODES:
            raise ValueError(f"head_mode must be one of {', '.join(HEAD_MODES)}; got {self.head_mode!r}")
        if self.awk and self.head_mode == "fc_baseline":
            raise ValueError("awk supervision needs a template head; fc_baseline has no heatmaps")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2 for batch-norm statistics")
        if self.epochs < 0 or self.lr < 0 or self.alpha < 0 or self.beta < 0 or self.lam <= 0:
            raise ValueError("epochs, lr, alpha, beta must be non-negative and lam positive")
        if not all(0 < m <= 1 for m in self.milestones):
            raise ValueError("lr milestones are fractions of the epoch budget in (0, 1]")

    @property
    def model_config(self) -> ModelConfig:
        return ModelConfig(
            head_mode=self.head_mode,
            backbone=BackboneConfig(self.backbone_widths, self.backbone_strides),
            head_bn=self.head_bn,
            bn_affine=self.bn_affine,
            dtype=self.dtype,
        )

    @property
    def synth_config(self) -> SynthConfig:
        return SynthConfig.from_dict(self.synth)

    def lr_at(self, epoch: int) -> float:
        """Step decay: multiply by ``lr_decay`` at each milestone fraction of ``epochs``."""
        drops = sum(epoch >= round(m * self.epochs) for m in self.milestones)
        return self.lr * self.lr_decay**drops

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**d)

    def replace(self, **changes) -> "TrainConfig":
        return TrainConfig.from_dict({**self.to_dict(), **changes})

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "TrainConfig":
        path = Path(path)
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(raw, dict):
            raise ValueError(f"{path}: config must be a JSON object")
        return cls.from_dict(raw)
