"""Heatmap export as 8-bit portable graymaps with a plain-text sidecar per sample."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np

from dtmpar.data.dataset import Dataset
from dtmpar.harness.evaluate import predict
from dtmpar.model import DtmModel
from dtmpar.supervision import awk_targets


def normalize_u8(hm: np.ndarray) -> np.ndarray:
    """Min-max scale to 0..255; a constant map becomes uniform 128."""
    lo, hi = float(hm.min()), float(hm.max())
    if hi - lo <= 0 or not np.isfinite(hi - lo):
        return np.full(hm.shape, 128, dtype=np.uint8)
    return np.round((hm - lo) / (hi - lo) * 255.0).astype(np.uint8)


def write_pgm(path: Path, img: np.ndarray) -> None:
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(img, dtype=np.uint8).tobytes())


def read_pgm(path: Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    magic, dims, maxval, rest = raw.split(b"\n", 3)
    if magic != b"P5" or maxval != b"255":
        raise ValueError(f"{path}: not an 8-bit binary PGM")
    w, h = map(int, dims.split())
    return np.frombuffer(rest, dtype=np.uint8, count=w * h).reshape(h, w)


def export_heatmaps(model: DtmModel, ds: Dataset, ids: Sequence[str], out_dir: str | Path) -> tuple[list[Path], list[str]]:
    """Write ``{id}_{attribute}.pgm`` for every requested sample and attribute.

    The maps are the post-BN, pre-sigmoid template responses. Each sample also
    gets ``{id}_heatmaps.txt`` with raw min/max, the argmax cell and the
    ground-truth keypoint cells per attribute. Returns (files written, unknown ids).
    """
    if not model.is_dtm:
        raise ValueError("the fc_baseline head produces no heatmaps")
    model.schema.check_same(ds.schema)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    position = {sid: i for i, sid in enumerate(ds.ids)}
    unknown = [sid for sid in ids if sid not in position]
    rows = [position[sid] for sid in ids if sid in position]
    written: list[Path] = []
    if not rows:
        return written, unknown

    schema = model.schema
    subset = ds.subset(rows)
    _, maps = predict(model, subset, heatmap_indices=list(range(schema.J)))
    _, _, H, W = maps.shape
    gap = set(model.head.gap_indices)
    for i, sid in enumerate(subset.ids):
        targets = awk_targets(schema, subset.keypoints(i), model.down_stride, (H, W))
        by_attr = dict(zip(schema.local_indices, targets))
        lines = [f"# sample {sid}: heatmap {H}x{W}, cells as row:col"]
        for j, name in enumerate(schema.names):
            hm = maps[i, j]
            path = out / f"{sid}_{name}.pgm"
            write_pgm(path, normalize_u8(hm))
            written.append(path)
            row, col = divmod(int(hm.argmax()), W)
            cells = " ".join(f"{t // W}:{t % W}" for t in by_attr.get(j, []))
            lines.append(
                f"{name} pool={'gap' if j in gap else 'gmp'} label={int(subset.labels[i, j])} "
                f"min={float(hm.min()):.6g} max={float(hm.max()):.6g} argmax={row}:{col} targets={cells or '-'}"
            )
        (out / f"{sid}_heatmaps.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return written, unknown
