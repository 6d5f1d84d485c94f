"""Versioned binary checkpoint container.

Layout::

    8 bytes   magic  b"DTMCKPT\\0"
    4 bytes   format version, uint32 little-endian
    8 bytes   header length, uint64 little-endian
    header    UTF-8 JSON, sorted keys, no whitespace
    payload   raw little-endian tensor bytes, concatenated in header order

The header records the attribute schema, the model config and seed, and a
free-form ``extra`` object (training config, epoch, metrics).  Tensors are
grouped by prefix: ``param/``, ``buffer/`` (batch-norm running statistics)
and ``velocity/`` (optimizer state).  Identical contents give identical bytes.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from dtmpar.errors import FormatError
from dtmpar.model import DtmModel, ModelConfig
from dtmpar.schema import AttributeSchema

MAGIC = b"DTMCKPT\0"
VERSION = 1


@dataclass
class Checkpoint:
    model: DtmModel
    extra: dict = field(default_factory=dict)
    velocity: dict[str, np.ndarray] = field(default_factory=dict)


def _schema_json(schema: AttributeSchema) -> dict:
    return {"names": schema.names, "assignment": schema.to_assignment()}


def _config_json(config: ModelConfig) -> dict:
    d = asdict(config)
    d["backbone"] = {k: list(v) if isinstance(v, tuple) else v for k, v in d["backbone"].items()}
    return d


def encode(model: DtmModel, extra: dict | None = None, velocity: dict[str, np.ndarray] | None = None) -> bytes:
    arrays: dict[str, np.ndarray] = {}
    arrays.update({f"param/{k}": t.data for k, t in model.named_parameters().items()})
    arrays.update({f"buffer/{k}": v for k, v in model.named_buffers().items()})
    arrays.update({f"velocity/{k}": v for k, v in (velocity or {}).items()})
    entries, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        le = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
        raw = le.tobytes()
        entries.append({"name": name, "dtype": le.dtype.str, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = {
        "schema": _schema_json(model.schema),
        "model_config": _config_json(model.config),
        "seed": model.seed,
        "extra": extra or {},
        "tensors": entries,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<IQ", VERSION, len(hbytes)) + hbytes + b"".join(chunks)


def save_checkpoint(path: str | Path, model: DtmModel, extra: dict | None = None,
                    velocity: dict[str, np.ndarray] | None = None) -> Path:
    """Write atomically (temp file then rename) so a crash never leaves a torn checkpoint."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(model, extra, velocity))
    os.replace(tmp, path)
    return path


def decode(raw: bytes, source: str | Path | None = None) -> Checkpoint:
    if raw[:8] != MAGIC:
        raise FormatError("not a checkpoint file (bad magic)", source)
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", source)
    header = json.loads(raw[20 : 20 + hlen].decode("utf-8"))
    payload = memoryview(raw)[20 + hlen :]

    schema = AttributeSchema.from_assignment(header["schema"]["names"], header["schema"]["assignment"])
    model = DtmModel(schema, ModelConfig(**header["model_config"]), seed=header["seed"])
    params = model.named_parameters()
    buffers = model.named_buffers()
    velocity: dict[str, np.ndarray] = {}
    for e in header["tensors"]:
        chunk = payload[e["offset"] : e["offset"] + e["nbytes"]]
        if len(chunk) != e["nbytes"]:
            raise FormatError(f"checkpoint truncated in tensor {e['name']}", source)
        arr = np.frombuffer(chunk, dtype=np.dtype(e["dtype"])).reshape(e["shape"])
        group, name = e["name"].split("/", 1)
        if group == "param":
            target = params[name].data
        elif group == "buffer":
            target = buffers[name]
        else:
            velocity[name] = arr.astype(arr.dtype.newbyteorder("="))
            continue
        if target.shape != arr.shape:
            raise FormatError(f"tensor {e['name']} has shape {arr.shape}, model expects {target.shape}", source)
        target[...] = arr
    return Checkpoint(model, header["extra"], velocity)


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    return decode(path.read_bytes(), path)

