"""Head-configuration grid and batch-size sweep.

The grid trains the five classifier variants (FC+BN baseline, template heads
with max, average and mixed pooling, and mixed pooling with keypoint
supervision) on the same data and seeds. The sweep repeats FC+BN and the
average-pooled template head across batch sizes.
"""
from __future__ import annotations

import csv
import logging
from pathlib import Path
from statistics import median
from typing import Sequence

from dtmpar.data.dataset import Dataset
from dtmpar.harness import plots
from dtmpar.harness.config import TrainConfig
from dtmpar.harness.evaluate import evaluate, localization
from dtmpar.harness.train import load_splits, train

log = logging.getLogger(__name__)

GRID = (
    ("FC + BN", "fc_baseline", False),
    ("DTM (GMP)", "dtm_gmp", False),
    ("DTM (GAP)", "dtm_gap", False),
    ("DTM (GAP+GMP)", "dtm_mixed", False),
    ("DTM+AWK (GAP+GMP)", "dtm_mixed", True),
)
SWEEP_METHODS = (("FC + BN", "fc_baseline"), ("DTM (GAP)", "dtm_gap"))
BATCH_SIZES = (16, 32, 64, 128)
METRICS = plots.METRIC_COLUMNS


def run_one(config: TrainConfig, splits: dict[str, Dataset], out_dir: Path | None = None, threads: int = 1) -> dict:
    """Train one configuration and score it on the test split."""
    result = train(config, splits, out_dir=out_dir, threads=threads)
    report = evaluate(result.model, splits["test"], config.threshold, config.eval_batch_size)
    loc = localization(result.model, splits["test"], config.eval_batch_size)
    return {
        "report": report,
        "localization": loc["rate"],
        "history": result.history,
        "model": result.model,
        **report.summary(),
    }


def _write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> Path:
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
    return path


def run_grid(base: TrainConfig, splits, seeds: Sequence[int], out_dir: Path | None = None, threads: int = 1) -> list[dict]:
    rows = []
    for method, head_mode, awk in GRID:
        runs = []
        for seed in seeds:
            cfg = base.replace(head_mode=head_mode, awk=awk, seed=seed)
            run_dir = out_dir / "runs" / f"{head_mode}{'_awk' if awk else ''}_s{seed}" if out_dir else None
            log.info("grid: %s seed %d", method, seed)
            runs.append(run_one(cfg, splits, run_dir, threads))
        row = {"method": method, "head_mode": head_mode, "awk": awk, "runs": runs}
        row.update({m: median(r[m] for r in runs) for m in METRICS})
        row["localization"] = median(r["localization"] for r in runs)
        rows.append(row)
    return rows


def run_sweep(base: TrainConfig, splits, seeds: Sequence[int], batch_sizes: Sequence[int] = BATCH_SIZES,
              threads: int = 1) -> dict[str, dict[int, dict[str, float]]]:
    out: dict[str, dict[int, dict[str, float]]] = {}
    for method, head_mode in SWEEP_METHODS:
        out[method] = {}
        for bs in batch_sizes:
            runs = [run_one(base.replace(head_mode=head_mode, awk=False, seed=s, batch_size=bs), splits, None, threads)
                    for s in seeds]
            out[method][bs] = {m: median(r[m] for r in runs) for m in METRICS}
            log.info("sweep: %s batch %d mA %.4f", method, bs, out[method][bs]["mA"])
    return out


def ablate(base: TrainConfig, out_dir: str | Path, seeds: Sequence[int] | None = None,
           batch_sizes: Sequence[int] | None = BATCH_SIZES, splits=None, threads: int = 1) -> dict:
    """Run the grid (and the sweep unless ``batch_sizes`` is empty) and write tables plus figures.

    Files: ``ablation.csv``/``.png``, ``per_attribute.csv``/``.png`` and, with
    a sweep, ``batch_sweep.csv``/``.png``. Metrics are medians over seeds.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seeds = list(seeds) if seeds else [base.seed]
    splits = splits if splits is not None else load_splits(base)
    rows = run_grid(base, splits, seeds, out, threads)
    _write_csv(
        out / "ablation.csv",
        ["method", *METRICS, "localization"],
        [[r["method"], *(f"{r[m]:.4f}" for m in METRICS), f"{r['localization']:.4f}"] for r in rows],
    )
    plots.ablation_bars(rows, out / "ablation.png")

    names = splits["test"].schema.names
    series = {r["method"]: [median(run["report"].per_attribute_mA[j] for run in r["runs"]) for j in range(len(names))]
              for r in rows if r["head_mode"] == "dtm_mixed"}
    _write_csv(out / "per_attribute.csv", ["attribute", *series],
               [[n, *(f"{series[k][j]:.4f}" for k in series)] for j, n in enumerate(names)])
    plots.per_attribute(names, series, out / "per_attribute.png")

    sweep = {}
    if batch_sizes:
        sweep = run_sweep(base, splits, seeds, batch_sizes, threads)
        _write_csv(
            out / "batch_sweep.csv",
            ["method", "batch_size", *METRICS],
            [[m, bs, *(f"{v[k]:.4f}" for k in METRICS)] for m, by in sweep.items() for bs, v in by.items()],
        )
        plots.batch_sweep(sweep, out / "batch_sweep.png")
    return {"grid": rows, "sweep": sweep}


def format_table(rows: Sequence[dict]) -> str:
    """Fixed-width text rendering of the grid for the terminal."""
    head = f"{'method':<20}" + "".join(f"{m:>8}" for m in METRICS)
    lines = [head, "-" * len(head)]
    for r in rows:
        lines.append(f"{r['method']:<20}" + "".join(f"{r[m]:>8.4f}" for m in METRICS))
    return "\n".join(lines)
