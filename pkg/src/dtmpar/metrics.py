"""Label-based and instance-based multi-label metrics.

Conventions for empty denominators:

* a sample with no true and no predicted attributes scores 1 on accuracy,
  precision and recall; when exactly one side is empty the affected ratio is 0;
* an attribute with no positives (or no negatives) in the split is scored on
  the defined side alone and flagged as one-sided;
* F1 is the harmonic mean of the *mean* precision and *mean* recall.

Means use correctly rounded summation, so results do not depend on sample or
attribute order down to the last bit.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from dtmpar.errors import DimensionError

DEFAULT_THRESHOLD = 0.5


def _mean(values: np.ndarray) -> float:
    return math.fsum(values.tolist()) / len(values)


def binarize(probabilities: np.ndarray, threshold: float = DEFAULT_THRESHOLD) -> np.ndarray:
    return (np.asarray(probabilities) >= threshold).astype(np.uint8)


def _check(preds: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    preds = np.asarray(preds).astype(bool)
    labels = np.asarray(labels).astype(bool)
    if preds.shape != labels.shape or preds.ndim != 2:
        raise DimensionError(f"predictions {preds.shape} and labels {labels.shape} must be equal N x J arrays")
    return preds, labels


def confusion_counts(preds: np.ndarray, labels: np.ndarray) -> dict[str, np.ndarray]:
    """Per-attribute TP/TN/FP/FN counts."""
    p, y = _check(preds, labels)
    return {
        "tp": (p & y).sum(axis=0),
        "tn": (~p & ~y).sum(axis=0),
        "fp": (p & ~y).sum(axis=0),
        "fn": (~p & y).sum(axis=0),
    }


def label_based_mA(preds: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean over attributes of (TPR + TNR) / 2."""
    p, y = _check(preds, labels)
    if p.shape[0] == 0:
        raise ValueError("cannot compute mA on an empty prediction set")
    c = confusion_counts(p, y)
    pos = c["tp"] + c["fn"]
    neg = c["tn"] + c["fp"]
    with np.errstate(invalid="ignore", divide="ignore"):
        tpr = c["tp"] / pos
        tnr = c["tn"] / neg
    per_attr = np.where(pos == 0, tnr, np.where(neg == 0, tpr, (tpr + tnr) / 2))
    return _mean(per_attr), per_attr


def instance_metrics(preds: np.ndarray, labels: np.ndarray) -> tuple[float, float, float, float]:
    """Example-based (accuracy, precision, recall, f1)."""
    p, y = _check(preds, labels)
    if p.shape[0] == 0:
        return 0.0, 0.0, 0.0, 0.0
    inter = (p & y).sum(axis=1)
    union = (p | y).sum(axis=1)
    n_pred = p.sum(axis=1)
    n_true = y.sum(axis=1)
    both_empty = union == 0

    def ratio(num, den):
        out = np.zeros(len(num))
        np.divide(num, den, out=out, where=den > 0)
        out[both_empty] = 1.0
        return out

    acc = _mean(ratio(inter, union))
    prec = _mean(ratio(inter, n_pred))
    rec = _mean(ratio(inter, n_true))
    f1 = 2 * prec * rec / (prec + rec) if prec + rec > 0 else 0.0
    return float(acc), float(prec), float(rec), float(f1)


@dataclass
class MetricsReport:
    mA: float
    accuracy: float
    precision: float
    recall: float
    f1: float
    per_attribute_mA: np.ndarray
    threshold: float
    counts: dict[str, np.ndarray]
    attribute_names: list[str] = field(default_factory=list)

    @property
    def one_sided(self) -> list[int]:
        pos = self.counts["tp"] + self.counts["fn"]
        neg = self.counts["tn"] + self.counts["fp"]
        return [int(j) for j in np.flatnonzero((pos == 0) | (neg == 0))]

    def summary(self) -> dict[str, float]:
        return {"mA": self.mA, "Accu": self.accuracy, "Prec": self.precision, "Recall": self.recall, "F1": self.f1}

    def to_text(self) -> str:
        """Key-value lines; per-attribute entries are keyed ``mA.<name>``."""
        names = self.attribute_names or [f"attr{j}" for j in range(len(self.per_attribute_mA))]
        lines = [f"threshold={self.threshold:g}"]
        lines += [f"{k}={v:.6f}" for k, v in self.summary().items()]
        lines += [f"mA.{n}={v:.6f}" for n, v in zip(names, self.per_attribute_mA)]
        lines.append("one_sided=" + ",".join(names[j] for j in self.one_sided))
        return "\n".join(lines) + "\n"

    def per_attribute_csv(self) -> str:
        names = self.attribute_names or [f"attr{j}" for j in range(len(self.per_attribute_mA))]
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["attribute", "mA", "tp", "tn", "fp", "fn", "one_sided"])
        flagged = set(self.one_sided)
        for j, name in enumerate(names):
            c = [int(self.counts[k][j]) for k in ("tp", "tn", "fp", "fn")]
            writer.writerow([name, f"{self.per_attribute_mA[j]:.6f}", *c, int(j in flagged)])
        return buf.getvalue()


def evaluate_predictions(
    probabilities: np.ndarray,
    labels: np.ndarray,
    threshold: float = DEFAULT_THRESHOLD,
    attribute_names: Sequence[str] = (),
) -> MetricsReport:
    preds = binarize(probabilities, threshold)
    mA, per_attr = label_based_mA(preds, labels)
    acc, prec, rec, f1 = instance_metrics(preds, labels)
    return MetricsReport(mA, acc, prec, rec, f1, per_attr, threshold, confusion_counts(preds, labels), list(attribute_names))
