"""Dataset files on disk.

Layout under a dataset root (all paths relative to it)::

    manifest.json       format version, image size, split membership, image dir/extension
    annotations.csv     header line of attribute names, then ``id,bit,...,bit`` rows
    keypoints.csv       ``id`` then 17 ``x,y,v`` triples (COCO order), no header
    assignment.json     attribute name -> list of COCO joint names (empty for global)
    images/<id>.ppm     binary RGB images (any Pillow-readable format is accepted on load)

Text files are UTF-8 with LF line endings.
"""
from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Mapping

import numpy as np

from dtmpar.data.dataset import Dataset
from dtmpar.errors import FormatError, SchemaMismatchError
from dtmpar.schema import NUM_JOINTS, AttributeSchema
from dtmpar.supervision import KeypointSet, load_assignment

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1


def _fmt(v: float) -> str:
    return format(float(v), ".10g")


# -- images ------------------------------------------------------------------------------


def write_ppm(path: Path, image: np.ndarray) -> None:
    """Write a 3 x h x w uint8 array as binary PPM."""
    _, h, w = image.shape
    header = f"P6\n{w} {h}\n255\n".encode("ascii")
    Path(path).write_bytes(header + np.ascontiguousarray(image.transpose(1, 2, 0)).tobytes())


def read_image(path: Path) -> np.ndarray:
    """Read an RGB image as 3 x h x w uint8."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"P6":
        fields, pos = [], 2
        while len(fields) < 3:
            while raw[pos : pos + 1].isspace():
                pos += 1
            if raw[pos : pos + 1] == b"#":
                pos = raw.index(b"\n", pos) + 1
                continue
            end = pos
            while not raw[end : end + 1].isspace():
                end += 1
            fields.append(int(raw[pos:end]))
            pos = end
        w, h, maxval = fields
        if maxval != 255:
            raise FormatError(f"only 8-bit PPM is supported, maxval {maxval}", path)
        data = np.frombuffer(raw, dtype=np.uint8, count=h * w * 3, offset=pos + 1)
        return data.reshape(h, w, 3).transpose(2, 0, 1).copy()
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB")).transpose(2, 0, 1).copy()


def _resize(image: np.ndarray, h: int, w: int) -> np.ndarray:
    from PIL import Image

    im = Image.fromarray(image.transpose(1, 2, 0))
    return np.asarray(im.resize((w, h), Image.BILINEAR)).transpose(2, 0, 1).copy()


# -- annotations and keypoints ---------------------------------------------------------


def write_annotations(path: Path, names, ids, labels: np.ndarray) -> None:
    lines = [",".join(names)]
    for sid, row in zip(ids, labels):
        lines.append(sid + "," + ",".join(str(int(v)) for v in row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def load_annotations(path: str | Path, expected_names=None) -> tuple[list[str], list[str], np.ndarray]:
    """Return (attribute names, ids, N x J uint8 labels). An empty file yields an empty set."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    lines = text.splitlines()
    if not lines or not lines[0].strip():
        return list(expected_names or []), [], np.zeros((0, len(expected_names or [])), dtype=np.uint8)
    names = [n.strip() for n in lines[0].split(",")]
    if names and names[0] == "id":
        names = names[1:]
    if expected_names is not None and list(expected_names) != names:
        raise SchemaMismatchError(f"{path}: annotation attributes {names} differ from expected {list(expected_names)}")
    ids, rows = [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != len(names) + 1:
            raise SchemaMismatchError(f"{path}:{lineno}: row has {len(parts) - 1} label columns, header has {len(names)}")
        try:
            bits = [int(p) for p in parts[1:]]
        except ValueError:
            raise FormatError("labels must be integers 0/1", path, lineno) from None
        if any(b not in (0, 1) for b in bits):
            raise FormatError("labels must be 0 or 1", path, lineno)
        ids.append(parts[0].strip())
        rows.append(bits)
    labels = np.asarray(rows, dtype=np.uint8).reshape(len(rows), len(names))
    return names, ids, labels


def write_keypoints(path: Path, ids, xy: np.ndarray, visible: np.ndarray) -> None:
    lines = []
    for sid, pts, vis in zip(ids, xy, visible):
        vals = []
        for (x, y), v in zip(pts, vis):
            vals += [_fmt(x), _fmt(y), "1" if v else "0"]
        lines.append(sid + "," + ",".join(vals))
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8", newline="\n")


def load_keypoints(path: str | Path) -> dict[str, KeypointSet]:
    path = Path(path)
    out: dict[str, KeypointSet] = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 1 + 3 * NUM_JOINTS:
            raise FormatError(f"expected id plus {3 * NUM_JOINTS} values, got {len(parts) - 1}", path, lineno)
        try:
            vals = np.asarray([float(p) for p in parts[1:]])
        except ValueError:
            raise FormatError("keypoint values must be numeric", path, lineno) from None
        out[parts[0].strip()] = KeypointSet.from_triples(vals)
    return out


# -- whole dataset ---------------------------------------------------------------------------


def save_dataset(root: str | Path, splits: Mapping[str, Dataset], extra: dict | None = None) -> Path:
    """Write every split under ``root``; returns the manifest path."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    first = next(iter(splits.values()))
    schema = first.schema
    h, w = first.image_size
    ids, labels, xy, vis = [], [], [], []
    for ds in splits.values():
        schema.check_same(ds.schema)
        for i, sid in enumerate(ds.ids):
            write_ppm(root / "images" / f"{sid}.ppm", ds.images[i])
        ids += ds.ids
        labels.append(ds.labels)
        xy.append(ds.keypoints_xy)
        vis.append(ds.keypoints_visible)
    write_annotations(root / "annotations.csv", schema.names, ids, np.concatenate(labels))
    write_keypoints(root / "keypoints.csv", ids, np.concatenate(xy), np.concatenate(vis))
    (root / "assignment.json").write_text(json.dumps(schema.to_assignment(), indent=2) + "\n", encoding="utf-8")
    manifest = {
        "version": MANIFEST_VERSION,
        "image_size": [h, w],
        "image_dir": "images",
        "image_ext": ".ppm",
        "splits": {name: list(ds.ids) for name, ds in splits.items()},
    }
    if extra:
        manifest["extra"] = extra
    path = root / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path


def load_dataset(root: str | Path, splits=None) -> dict[str, Dataset]:
    """Load splits listed in ``manifest.json``.

    Samples without a keypoint row get all-invisible keypoints (counted in
    ``Dataset.warnings``); ids listed in the manifest but missing from the
    annotations, or without an image, are reported and skipped.
    """
    root = Path(root)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise FileNotFoundError(f"no manifest.json under {root}")
    manifest = json.loads(mpath.read_text(encoding="utf-8"))
    if manifest.get("version") != MANIFEST_VERSION:
        raise FormatError(f"unsupported manifest version {manifest.get('version')}", mpath)
    h, w = manifest["image_size"]
    names, ids, labels = load_annotations(root / "annotations.csv")
    assignment = load_assignment(root / "assignment.json")
    schema = AttributeSchema.from_assignment(names, assignment)
    kp_path = root / "keypoints.csv"
    keypoints = load_keypoints(kp_path) if kp_path.exists() else {}
    row_of = {sid: i for i, sid in enumerate(ids)}
    for sid in keypoints:
        if sid not in row_of:
            log.warning("keypoints for unknown id %s ignored", sid)

    image_dir = root / manifest.get("image_dir", "images")
    ext = manifest.get("image_ext", ".ppm")
    out: dict[str, Dataset] = {}
    wanted = splits if splits is not None else list(manifest["splits"])
    for split in wanted:
        warnings: list[str] = []
        sel, images, xy, vis = [], [], [], []
        missing_kp = 0
        for sid in manifest["splits"][split]:
            if sid not in row_of:
                warnings.append(f"{sid}: no annotation row, skipped")
                continue
            img_path = image_dir / f"{sid}{ext}"
            if not img_path.exists():
                warnings.append(f"{sid}: image {img_path.name} missing, skipped")
                continue
            img = read_image(img_path)
            kp = keypoints.get(sid)
            if kp is None:
                missing_kp += 1
                kp = KeypointSet.invisible()
            if img.shape[1:] != (h, w):
                sy, sx = h / img.shape[1], w / img.shape[2]
                kp = KeypointSet(kp.xy * [sx, sy], kp.visible).clip_to(h, w)
                img = _resize(img, h, w)
            sel.append(row_of[sid])
            images.append(img)
            xy.append(kp.xy)
            vis.append(kp.visible)
        if missing_kp:
            warnings.append(f"{missing_kp} samples without keypoints (all joints invisible)")
        for msg in warnings:
            log.warning("%s: %s", split, msg)
        n = len(sel)
        out[split] = Dataset(
            schema,
            [ids[i] for i in sel],
            np.stack(images) if n else np.zeros((0, 3, h, w), dtype=np.uint8),
            labels[sel] if n else np.zeros((0, schema.J), dtype=np.uint8),
            np.stack(xy) if n else np.zeros((0, NUM_JOINTS, 2)),
            np.stack(vis) if n else np.zeros((0, NUM_JOINTS), dtype=bool),
            warnings,
        )
    return out
