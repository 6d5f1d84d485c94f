"""The training loop.

Every random draw is keyed on ``(seed, epoch)`` for the shuffle and
``(seed, epoch, sample index)`` for augmentation, so a run resumed from a
checkpoint, or run with several augmentation threads, follows the same
trajectory as an uninterrupted serial run.
"""
from __future__ import annotations

import csv
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from dtmpar.checkpoint import load_checkpoint, save_checkpoint
from dtmpar.core import Tensor, sgd_step
from dtmpar.data.augment import augment
from dtmpar.data.dataset import Dataset
from dtmpar.data.io import load_dataset
from dtmpar.data.synthetic import gen_synthetic
from dtmpar.errors import NonFiniteError
from dtmpar.harness.config import TrainConfig
from dtmpar.harness.evaluate import evaluate
from dtmpar.model import DtmModel
from dtmpar.supervision import LossWeights, awk_loss, awk_targets, positive_ratios, total_loss, wce_loss

log = logging.getLogger(__name__)

LOG_FIELDS = ("epoch", "lr", "loss_wce", "loss_awk", "loss_total", "val_mA", "seconds")


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    loss_wce: float
    loss_awk: float
    loss_total: float
    val_mA: float
    seconds: float


@dataclass
class TrainResult:
    model: DtmModel
    history: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1
    best_val_mA: float = float("nan")
    out_dir: Path | None = None


def load_splits(config: TrainConfig) -> dict[str, Dataset]:
    if config.data:
        return load_dataset(config.data)
    return gen_synthetic(config.synth_config)


def _augmented(ds: Dataset, idx: np.ndarray, config: TrainConfig, epoch: int, pool: ThreadPoolExecutor | None):
    def one(i):
        s = ds.raw_sample(int(i))
        if config.augment:
            s = augment(s, np.random.default_rng((config.seed, epoch, int(i))), pad=config.crop_pad)
        return s

    return list(pool.map(one, idx)) if pool else [one(i) for i in idx]


def _write_log(path: Path, history: list[EpochRecord]) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LOG_FIELDS)
        for rec in history:
            writer.writerow([rec.epoch] + [repr(float(getattr(rec, k))) for k in LOG_FIELDS[1:]])


def read_log(path: str | Path) -> list[EpochRecord]:
    with Path(path).open(encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return [EpochRecord(int(r["epoch"]), *(float(r[k]) for k in LOG_FIELDS[1:])) for r in rows]


def train_step(model: DtmModel, images: np.ndarray, labels: np.ndarray, targets, weights: LossWeights,
               use_awk: bool) -> tuple[Tensor, float, float]:
    """Forward and backward for one batch; returns (total loss, wce value, awk value)."""
    out = model(images)
    l_wce = wce_loss(out.logits, labels, weights)
    local = model.schema.local_indices
    if use_awk and local:
        l_awk = awk_loss(out.heatmaps(local), labels[:, local], targets)
        loss = total_loss(l_awk, l_wce, weights.alpha, weights.beta)
        awk_value = float(l_awk.item())
    else:
        loss = l_wce * weights.beta
        awk_value = 0.0
    loss.backward()
    return loss, float(l_wce.item()), awk_value


def train(
    config: TrainConfig,
    splits: dict[str, Dataset] | None = None,
    out_dir: str | Path | None = None,
    resume: bool = False,
    threads: int = 1,
    stop_after: int | None = None,
) -> TrainResult:
    """Train per ``config``; returns the best-validation model.

    With ``out_dir`` the run writes ``config.json``, ``train_log.csv``,
    ``last.ckpt`` (every epoch, used for resuming) and ``best.ckpt``.
    ``stop_after`` ends this call after that many epochs, as an interruption would.
    """
    splits = splits if splits is not None else load_splits(config)
    train_ds, val_ds = splits["train"], splits.get("val")
    schema = train_ds.schema
    if len(train_ds) < config.batch_size:
        raise ValueError(f"training split has {len(train_ds)} samples, fewer than one batch of {config.batch_size}")
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        config.save(out / "config.json")

    model = DtmModel(schema, config.model_config, seed=config.seed)
    params = model.named_parameters()
    velocity = [np.zeros_like(p.data) for p in params.values()]
    history: list[EpochRecord] = []
    best_epoch, best_mA, best_state = -1, -math.inf, None
    start_epoch = 0

    if resume and out and (out / "last.ckpt").exists():
        ckpt = load_checkpoint(out / "last.ckpt")
        if ckpt.extra.get("config") != config.to_dict():
            raise ValueError(f"{out / 'last.ckpt'} was written by a different config; refusing to resume")
        model = ckpt.model
        params = model.named_parameters()
        velocity = [ckpt.velocity[k].copy() for k in params]
        history = read_log(out / "train_log.csv")[: ckpt.extra["epoch"] + 1]
        start_epoch = ckpt.extra["epoch"] + 1
        best_epoch, best_mA = ckpt.extra["best_epoch"], ckpt.extra["best_val_mA"]
        if (out / "best.ckpt").exists():
            best_state = _snapshot(load_checkpoint(out / "best.ckpt").model)
        log.info("resuming at epoch %d", start_epoch)

    weights = LossWeights(positive_ratios(train_ds.labels), config.alpha, config.beta, config.lam)
    use_awk = config.awk and model.is_dtm
    r = model.down_stride
    h, w = train_ds.image_size
    H, W = model.heatmap_size(h, w)
    dtype = model.dtype
    n_batches = len(train_ds) // config.batch_size  # the trailing partial batch is dropped
    pool = ThreadPoolExecutor(threads) if threads > 1 else None

    try:
        end = config.epochs if stop_after is None else min(config.epochs, start_epoch + stop_after)
        for epoch in range(start_epoch, end):
            t0 = time.perf_counter()
            lr = config.lr_at(epoch)
            order = np.random.default_rng((config.seed, epoch)).permutation(len(train_ds))
            model.train()
            sums = np.zeros(3)
            for b in range(n_batches):
                idx = order[b * config.batch_size : (b + 1) * config.batch_size]
                samples = _augmented(train_ds, idx, config, epoch, pool)
                images = np.stack([s.image for s in samples]).astype(dtype) / dtype.type(255.0)
                labels = np.stack([s.labels for s in samples])
                targets = [awk_targets(schema, s.keypoints, r, (H, W)) for s in samples] if use_awk else None
                for p in params.values():
                    p.grad = None
                loss, l_wce, l_awk = train_step(model, images, labels, targets, weights, use_awk)
                value = float(loss.item())
                if not math.isfinite(value):
                    where = f"; last good checkpoint {out / 'last.ckpt'}" if out and epoch > 0 else ""
                    raise NonFiniteError(f"non-finite loss {value} at epoch {epoch} batch {b} (wce {l_wce}, awk {l_awk}){where}")
                sgd_step(list(params.values()), [p.grad for p in params.values()], lr, config.momentum,
                         config.weight_decay, velocity)
                sums += (l_wce, l_awk, value)

            means = sums / n_batches
            val_mA = evaluate(model, val_ds, config.threshold, config.eval_batch_size).mA if val_ds is not None and len(val_ds) else float("nan")
            rec = EpochRecord(epoch, lr, *map(float, means), float(val_mA), time.perf_counter() - t0)
            history.append(rec)
            log.info("epoch %d lr %.4g wce %.5f awk %.5f val_mA %.4f (%.1fs)", epoch, lr, *means[:2], val_mA, rec.seconds)

            improved = not math.isnan(val_mA) and val_mA > best_mA
            if improved or (best_state is None and math.isnan(val_mA)):
                best_epoch, best_mA = epoch, val_mA
                best_state = _snapshot(model)
            if out:
                extra = {"config": config.to_dict(), "epoch": epoch, "best_epoch": best_epoch, "best_val_mA": best_mA}
                save_checkpoint(out / "last.ckpt", model, extra, dict(zip(params, velocity)))
                if improved or not (out / "best.ckpt").exists():
                    save_checkpoint(out / "best.ckpt", model, {**extra, "val_mA": val_mA})
                _write_log(out / "train_log.csv", history)
    finally:
        if pool:
            pool.shutdown()

    if best_state is not None:
        _restore(model, best_state)
    model.eval()
    return TrainResult(model, history, best_epoch, best_mA, out)


def _snapshot(model: DtmModel) -> dict[str, np.ndarray]:
    state = {f"p:{k}": t.data.copy() for k, t in model.named_parameters().items()}
    state.update({f"b:{k}": v.copy() for k, v in model.named_buffers().items()})
    return state


def _restore(model: DtmModel, state: dict[str, np.ndarray]) -> None:
    for k, t in model.named_parameters().items():
        t.data[...] = state[f"p:{k}"]
    for k, v in model.named_buffers().items():
        v[...] = state[f"b:{k}"]
