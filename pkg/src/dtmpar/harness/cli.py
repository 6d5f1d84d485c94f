"""Command-line entry point: ``dtmpar <subcommand> [options]``.

Exit codes: 0 success, 1 usage error (bad flags, missing config file),
2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

log = logging.getLogger("dtmpar")

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON config file")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--threads", type=int, default=1, help="worker threads (1 = fully serial)")
    common.add_argument("-q", "--quiet", action="store_true", help="only log warnings")

    p = _Parser(prog="dtmpar", description="Template-matching pedestrian attribute classifier with keypoint supervision.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-synth", parents=[common], help="generate the synthetic dataset")
    g.add_argument("--n-train", type=int)
    g.add_argument("--n-val", type=int)
    g.add_argument("--n-test", type=int)

    t = sub.add_parser("train", parents=[common], help="train one model")
    t.add_argument("--data", type=Path, help="dataset root (default: synthetic data from the config)")
    t.add_argument("--resume", action="store_true", help="continue from OUT/last.ckpt")
    t.add_argument("--epochs", type=int)

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    e.add_argument("--checkpoint", type=Path, required=True)
    e.add_argument("--data", type=Path)
    e.add_argument("--split", default="test")
    e.add_argument("--threshold", type=float, default=0.5)

    x = sub.add_parser("export-heatmaps", parents=[common], help="write per-attribute heatmaps as PGM files")
    x.add_argument("--checkpoint", type=Path, required=True)
    x.add_argument("--data", type=Path)
    x.add_argument("--split", default="test")
    sel = x.add_mutually_exclusive_group(required=True)
    sel.add_argument("--ids", help="comma-separated sample ids")
    sel.add_argument("--first", type=int, help="export the first N samples of the split")

    a = sub.add_parser("ablate", parents=[common], help="run the head grid and the batch-size sweep")
    a.add_argument("--data", type=Path)
    a.add_argument("--seeds", type=_int_list, help="comma-separated seeds (default: the config seed)")
    a.add_argument("--batch-sizes", type=_int_list, default=[16, 32, 64, 128])
    a.add_argument("--no-sweep", action="store_true")
    a.add_argument("--epochs", type=int)
    return p


def _read_json(path: Path | None) -> dict:
    if path is None:
        return {}
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise UsageError(f"{path}: config must be a JSON object")
    return raw


def _train_config(args):
    from dtmpar.harness.config import TrainConfig

    raw = _read_json(args.config)
    for key in ("seed", "epochs"):
        if getattr(args, key, None) is not None:
            raw[key] = getattr(args, key)
    if getattr(args, "data", None) is not None:
        raw["data"] = str(args.data)
    try:
        return TrainConfig.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad config: {exc}") from None


def _require_out(args) -> Path:
    if args.out is None:
        raise UsageError("--out is required")
    return args.out


def cmd_gen_synth(args) -> int:
    from dtmpar.data.io import save_dataset
    from dtmpar.data.synthetic import SynthConfig, gen_synthetic

    out = _require_out(args)
    raw = _read_json(args.config)
    raw = dict(raw["synth"]) if "synth" in raw else raw  # a training config carries the synth block
    for flag, key in (("n_train", "n_train"), ("n_val", "n_val"), ("n_test", "n_test"), ("seed", "seed")):
        if getattr(args, flag) is not None:
            raw[key] = getattr(args, flag)
    try:
        cfg = SynthConfig.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad synthetic config: {exc}") from None
    splits = gen_synthetic(cfg)
    save_dataset(out, splits, extra={"synth_config": cfg.to_dict()})
    print(f"wrote {sum(map(len, splits.values()))} samples to {out}")
    return 0


def cmd_train(args) -> int:
    from dtmpar.harness import plots
    from dtmpar.harness.evaluate import evaluate
    from dtmpar.harness.train import load_splits, train

    cfg = _train_config(args)
    out = _require_out(args)
    splits = load_splits(cfg)
    result = train(cfg, splits, out_dir=out, resume=args.resume, threads=args.threads)
    plots.training_curves(result.history, out / "training.png")
    line = f"best epoch {result.best_epoch}, val mA {result.best_val_mA:.4f}"
    if "test" in splits and len(splits["test"]):
        line += f", test mA {evaluate(result.model, splits['test'], cfg.threshold).mA:.4f}"
    print(line)
    return 0


def _eval_data(args, ckpt):
    """The split to score: --data if given, else whatever produced the checkpoint."""
    from dtmpar.data.io import load_dataset
    from dtmpar.harness.config import TrainConfig
    from dtmpar.harness.train import load_splits

    if args.data is not None:
        splits = load_dataset(args.data)
    elif "config" in ckpt.extra:
        splits = load_splits(TrainConfig.from_dict(ckpt.extra["config"]))
    else:
        raise UsageError("checkpoint carries no data source; pass --data")
    if args.split not in splits:
        raise UsageError(f"split {args.split!r} not found (have {', '.join(splits)})")
    return splits[args.split]


def cmd_eval(args) -> int:
    from dtmpar.checkpoint import load_checkpoint
    from dtmpar.harness import plots
    from dtmpar.harness.evaluate import evaluate, localization

    ckpt = load_checkpoint(args.checkpoint)
    ds = _eval_data(args, ckpt)
    report = evaluate(ckpt.model, ds, args.threshold)
    text = report.to_text()
    if ckpt.model.is_dtm:
        loc = localization(ckpt.model, ds)
        text += f"localization={loc['rate']:.6f}\nlocalization_pairs={loc['total']}\n"
    sys.stdout.write(text)
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "report.txt").write_text(text, encoding="utf-8")
        (args.out / "per_attribute.csv").write_text(report.per_attribute_csv(), encoding="utf-8")
        plots.per_attribute(report.attribute_names, {"mA": list(report.per_attribute_mA)}, args.out / "per_attribute.png")
    return 0


def cmd_export(args) -> int:
    from dtmpar.checkpoint import load_checkpoint
    from dtmpar.harness.export import export_heatmaps

    out = _require_out(args)
    ckpt = load_checkpoint(args.checkpoint)
    ds = _eval_data(args, ckpt)
    ids = [s.strip() for s in args.ids.split(",") if s.strip()] if args.ids else ds.ids[: args.first]
    written, unknown = export_heatmaps(ckpt.model, ds, ids, out)
    print(f"wrote {len(written)} heatmaps to {out}")
    if unknown:
        print("unknown ids: " + ", ".join(unknown), file=sys.stderr)
        return 2
    return 0


def cmd_ablate(args) -> int:
    from dtmpar.harness.ablate import ablate, format_table

    cfg = _train_config(args)
    out = _require_out(args)
    seeds = args.seeds or ([args.seed] if args.seed is not None else None)
    res = ablate(cfg, out, seeds, [] if args.no_sweep else args.batch_sizes, threads=args.threads)
    print(format_table(res["grid"]))
    return 0


COMMANDS = {
    "gen-synth": cmd_gen_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "export-heatmaps": cmd_export,
    "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads < 1:
        print("dtmpar: error: --threads must be at least 1", file=sys.stderr)
        return 1
    if "numpy" not in sys.modules:
        for var in _THREAD_VARS:
            os.environ.setdefault(var, str(args.threads))
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"dtmpar: error: {exc}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        return 2
    except Exception as exc:  # runtime failures surface as exit code 2
        log.debug("failure", exc_info=True)
        print(f"dtmpar: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
