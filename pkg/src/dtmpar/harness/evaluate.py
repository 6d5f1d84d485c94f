"""Inference, metrics and heatmap localization on a dataset split."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from dtmpar.checkpoint import load_checkpoint
from dtmpar.core import stable_sigmoid
from dtmpar.data.dataset import Dataset
from dtmpar.metrics import MetricsReport, evaluate_predictions
from dtmpar.model import DtmModel
from dtmpar.supervision import awk_targets


def _batches(n: int, size: int):
    for start in range(0, n, size):
        yield np.arange(start, min(start + size, n))


def float_images(ds: Dataset, idx, dtype) -> np.ndarray:
    return ds.images[idx].astype(dtype) / dtype.type(255.0)


def predict(model: DtmModel, ds: Dataset, batch_size: int = 250, heatmap_indices=None):
    """Eval-mode logits (N x J); with ``heatmap_indices`` also the stacked heatmaps for those attributes."""
    was_training = model.training
    model.eval()
    logits, maps = [], []
    try:
        for idx in _batches(len(ds), batch_size):
            out = model(float_images(ds, idx, model.dtype))
            logits.append(out.logits.data)
            if heatmap_indices is not None:
                maps.append(out.heatmaps(heatmap_indices).data)
    finally:
        if was_training:
            model.train()
    J = model.schema.J
    logits = np.concatenate(logits) if logits else np.zeros((0, J), dtype=model.dtype)
    if heatmap_indices is None:
        return logits
    return logits, (np.concatenate(maps) if maps else None)


def evaluate(model: DtmModel | str | Path, ds: Dataset, threshold: float = 0.5, batch_size: int = 250) -> MetricsReport:
    """Metrics of ``model`` (or a checkpoint path) on ``ds``; batch norm uses running statistics."""
    if not isinstance(model, DtmModel):
        model = load_checkpoint(model).model
    model.schema.check_same(ds.schema)
    if len(ds) == 0:
        raise ValueError("cannot evaluate on an empty split")
    probs = stable_sigmoid(predict(model, ds, batch_size).astype(np.float64))
    return evaluate_predictions(probs, ds.labels, threshold, model.schema.names)


def localization(model: DtmModel, ds: Dataset, batch_size: int = 250, radius: int = 1) -> dict:
    """Share of positive (sample, local attribute) pairs whose heatmap argmax lies near a target cell.

    Nearness is Chebyshev distance in heatmap cells. Pairs without any visible
    assigned joint have no target and are not counted.
    """
    schema = model.schema
    local = schema.local_indices
    if not model.is_dtm or not local:
        return {"rate": float("nan"), "hits": 0, "total": 0, "per_attribute": {}}
    _, maps = predict(model, ds, batch_size, heatmap_indices=local)
    n, jl, H, W = maps.shape
    flat_arg = maps.reshape(n, jl, -1).argmax(axis=2)
    hits = np.zeros(jl, dtype=int)
    totals = np.zeros(jl, dtype=int)
    for i in range(n):
        targets = awk_targets(schema, ds.keypoints(i), model.down_stride, (H, W))
        for s, j in enumerate(local):
            if not ds.labels[i, j] or not targets[s]:
                continue
            row, col = divmod(int(flat_arg[i, s]), W)
            near = any(max(abs(row - t // W), abs(col - t % W)) <= radius for t in targets[s])
            hits[s] += near
            totals[s] += 1
    total = int(totals.sum())
    return {
        "rate": float(hits.sum() / total) if total else float("nan"),
        "hits": int(hits.sum()),
        "total": total,
        "per_attribute": {schema.names[j]: (int(hits[s]), int(totals[s])) for s, j in enumerate(local)},
    }
