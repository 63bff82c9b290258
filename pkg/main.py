#!/usr/bin/env python3
"""
boxboost - Main CLI Interface
Runs the box-supervised boosting pipeline stage by stage from the command line
"""

import argparse
import json
import logging
import os
import sys
from typing import Dict, List, Optional

import numpy as np

from checkpoint import load_checkpoint
from config import AblationSpec, StageConfig, TrainConfig, load_config_file, resolve_seed
from dataset import CorpusSpec, Split, load_manifest, read_image, read_mask
from errors import BoxBoostError, ConfigError, DataIOError, UsageError
from evalbench import threshold_curve, write_curve_csv
from ffs import FfsConfig, noise_rejection_audit
from mask_core import DEFAULT_BINARIZE_THRESHOLD
from optim import AdamWConfig
from pipeline import Pipeline
from toynet import NetworkConfig, predict
import visualizations

logger = logging.getLogger("boxboost")

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"
COMMANDS = ("synth", "pretrain", "predict", "ffs", "boost", "eval", "curve", "ablate")


def print_header(title: str):
    """Print a formatted header"""
    print("\n" + "=" * 70)
    print(f"  {title}")
    print("=" * 70 + "\n")


def print_separator():
    """Print a horizontal rule"""
    print("-" * 70)


class _Parser(argparse.ArgumentParser):
    """ArgumentParser that raises UsageError instead of exiting"""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ==================== PARSER ====================

def _add_common(parser: argparse.ArgumentParser):
    parser.add_argument("--run-dir", default="runs/default", help="Run directory (ledger and stage outputs)")
    parser.add_argument("--config", default=None, help="Run-summary JSON whose config supplies defaults")
    parser.add_argument("--workers", type=int, default=os.cpu_count() or 1, help="Threads for per-item work")
    parser.add_argument("--seed", type=int, default=None, help="Global seed (fallback: $BOXBOOST_SEED, then 0)")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    parser.add_argument("--chart", action="store_true", help="Also write PNG charts")


def _add_manifest(parser: argparse.ArgumentParser):
    parser.add_argument("--manifest", default=None,
                        help="Corpus manifest (default: corpus of the latest synth run)")


def _add_corpus(parser: argparse.ArgumentParser):
    defaults = CorpusSpec()
    parser.add_argument("--n-mask", type=int, default=defaults.n_mask, help="Mask-annotated training images")
    parser.add_argument("--n-box", type=int, default=defaults.n_box, help="Box-annotated training images")
    parser.add_argument("--test-sets", default=_format_test_sets(defaults.test_sets),
                        help="Test datasets as name:count,name:count")
    parser.add_argument("--size", type=int, default=defaults.size, help="Image side in pixels")
    parser.add_argument("--blur", type=float, default=defaults.blur, help="Fraction of blurred box images")
    parser.add_argument("--no-polyp", type=float, default=defaults.no_polyp,
                        help="Fraction of object-free box images with a spurious box")
    parser.add_argument("--wrong-label", type=float, default=defaults.wrong_label,
                        help="Fraction of box images carrying another image's boxes")
    parser.add_argument("--imprecise-box", type=float, default=defaults.imprecise_box,
                        help="Fraction of box images with jittered boxes")


def _add_training(parser: argparse.ArgumentParser, epochs: int = 20, lr: float = 1e-4):
    defaults = AdamWConfig()
    parser.add_argument("--epochs", type=int, default=epochs)
    parser.add_argument("--batch-size", type=int, default=TrainConfig().batch_size)
    parser.add_argument("--lr", type=float, default=lr, help="AdamW learning rate")
    parser.add_argument("--weight-decay", type=float, default=defaults.weight_decay)
    parser.add_argument("--no-augment", action="store_true", help="Disable flip/rotation/scale augmentation")


def _add_ffs(parser: argparse.ArgumentParser):
    defaults = FfsConfig()
    parser.add_argument("--dice-threshold", type=float, default=defaults.dice_threshold,
                        help="Keep a box image only when Dice(box, prediction) is above this")
    parser.add_argument("--binarize-threshold", type=float, default=defaults.binarize_threshold,
                        help="Probability above which a predicted pixel is foreground")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="boxboost", description="Box-supervised segmentation boosting",
                     formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    fmt = argparse.ArgumentDefaultsHelpFormatter

    p = sub.add_parser("synth", help="Generate a synthetic corpus", formatter_class=fmt)
    _add_common(p)
    _add_corpus(p)
    _add_ffs(p)
    p.add_argument("--audit", action="store_true", help="Report the oracle filter audit per noise mode")

    p = sub.add_parser("pretrain", help="Train a baseline on the mask split", formatter_class=fmt)
    _add_common(p)
    _add_manifest(p)
    _add_training(p)
    p.add_argument("--arch", choices=["A", "B"], default="A")

    p = sub.add_parser("predict", help="Predict probability maps for a split", formatter_class=fmt)
    _add_common(p)
    _add_manifest(p)
    p.add_argument("--checkpoint", default=None, help="Checkpoint (default: latest pretrain run)")
    p.add_argument("--split", choices=[s.value for s in Split], default=Split.TRAIN_BOX.value)

    p = sub.add_parser("ffs", help="Filter box images and fuse pseudo labels", formatter_class=fmt)
    _add_common(p)
    _add_manifest(p)
    _add_ffs(p)
    p.add_argument("--predictions", default=None, help="Probability-map directory (default: latest predict run)")

    p = sub.add_parser("boost", help="Dual-network training on pseudo labels", formatter_class=fmt)
    _add_common(p)
    _add_manifest(p)
    _add_training(p)
    p.add_argument("--arch-a", choices=["A", "B"], default="A")
    p.add_argument("--arch-b", choices=["A", "B"], default="B")
    p.add_argument("--no-ic", action="store_true", help="Disable the consistency term")
    p.add_argument("--warm-start", action="store_true", help="Start from the latest baseline of each architecture")

    p = sub.add_parser("eval", help="Per-dataset Dice/IoU and wAVG", formatter_class=fmt)
    _add_common(p)
    _add_manifest(p)
    p.add_argument("--checkpoint", action="append", default=None, metavar="NAME=PATH",
                   help="Network to score (repeatable; default: latest boost run)")
    p.add_argument("--threshold", type=float, default=DEFAULT_BINARIZE_THRESHOLD)
    p.add_argument("--no-curves", action="store_true", help="Skip threshold-curve CSVs")

    p = sub.add_parser("curve", help="Dice against binarization threshold", formatter_class=fmt)
    _add_common(p)
    _add_manifest(p)
    p.add_argument("--checkpoint", default=None, help="Checkpoint (default: network A of the latest boost run)")
    p.add_argument("--points", type=int, default=256, help="Evenly spaced thresholds in [0, 1]")
    p.add_argument("--out", default=None, help="Output directory (default: <run-dir>/curves)")

    p = sub.add_parser("ablate", help="Baseline / +FFS / +FFS+IC over seeds", formatter_class=fmt)
    _add_common(p)
    _add_corpus(p)
    _add_ffs(p)
    spec = AblationSpec()
    p.add_argument("--seeds", default=",".join(str(s) for s in spec.seeds), help="Comma-separated seeds")
    p.add_argument("--pretrain-epochs", type=int, default=spec.pretrain.epochs)
    p.add_argument("--boost-epochs", type=int, default=spec.boost.epochs)
    p.add_argument("--batch-size", type=int, default=spec.boost.batch_size)
    p.add_argument("--lr", type=float, default=spec.pretrain.optimizer.lr,
                   help="AdamW learning rate of the baselines (desk scale)")
    p.add_argument("--boost-lr", type=float, default=spec.boost.optimizer.lr,
                   help="AdamW learning rate of the boost stage")
    p.add_argument("--weight-decay", type=float, default=spec.boost.optimizer.weight_decay)
    p.add_argument("--rounds", type=int, default=spec.rounds)
    p.add_argument("--warm-start", action=argparse.BooleanOptionalAction, default=spec.warm_start,
                   help="Boost from the baselines of the same seed")
    p.add_argument("--threshold", type=float, default=spec.eval_threshold)
    return parser


def _subparsers(parser: argparse.ArgumentParser) -> Dict[str, argparse.ArgumentParser]:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return dict(action.choices)
    return {}


def _apply_config_file(parser: argparse.ArgumentParser, argv: List[str]):
    """Install the config file's values as defaults of the chosen subcommand"""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", default=None)
    known, _ = pre.parse_known_args(argv)
    command = next((arg for arg in argv if arg in COMMANDS), None)
    if not known.config or command is None:
        return

    values = load_config_file(known.config)
    subparsers = _subparsers(parser)
    every_dest = {"command"}
    for sub in subparsers.values():
        every_dest |= {a.dest for a in sub._actions}
    unknown = set(values) - every_dest
    if unknown:
        raise ConfigError(f"Unknown keys in config file '{known.config}': {sorted(unknown)}")
    target = subparsers[command]
    dests = {a.dest for a in target._actions} - {"help", "config"}
    target.set_defaults(**{k: v for k, v in values.items() if k in dests})


def parse_args(argv: List[str]) -> argparse.Namespace:
    parser = build_parser()
    _apply_config_file(parser, argv)
    args = parser.parse_args(argv)
    args.seed = resolve_seed(args.seed)
    return args


def resolved_config(args: argparse.Namespace) -> Dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in ("config", "log_level")}


def configure_logging(level: str):
    logging.basicConfig(level=getattr(logging, level), format=LOG_FORMAT, stream=sys.stderr, force=True)


# ==================== HELPERS ====================

def _format_test_sets(test_sets: Dict[str, int]) -> str:
    return ",".join(f"{name}:{count}" for name, count in test_sets.items())


def _parse_test_sets(value) -> Dict[str, int]:
    if isinstance(value, dict):
        return {str(k): int(v) for k, v in value.items()}
    result = {}
    for part in str(value).split(","):
        name, sep, count = part.partition(":")
        if not sep or not name.strip():
            raise ConfigError(f"--test-sets entries must look like name:count, got {part!r}")
        try:
            result[name.strip()] = int(count)
        except ValueError:
            raise ConfigError(f"Invalid image count in --test-sets entry {part!r}")
    return result


def _parse_seeds(value) -> List[int]:
    if isinstance(value, (list, tuple)):
        return [int(v) for v in value]
    try:
        return [int(part) for part in str(value).split(",") if part.strip()]
    except ValueError:
        raise ConfigError(f"--seeds must be comma-separated integers, got {value!r}")


def _corpus_spec(args) -> CorpusSpec:
    return CorpusSpec(
        n_mask=args.n_mask, n_box=args.n_box, test_sets=_parse_test_sets(args.test_sets),
        size=args.size, blur=args.blur, no_polyp=args.no_polyp, wrong_label=args.wrong_label,
        imprecise_box=args.imprecise_box, seed=args.seed,
    )


def _train_config(args, epochs: Optional[int] = None) -> TrainConfig:
    return TrainConfig(
        epochs=epochs if epochs is not None else args.epochs,
        batch_size=args.batch_size,
        seed=args.seed,
        augment=not getattr(args, "no_augment", False),
        optimizer=AdamWConfig(lr=args.lr, weight_decay=args.weight_decay),
    )


def _ffs_config(args) -> FfsConfig:
    return FfsConfig(dice_threshold=args.dice_threshold, binarize_threshold=args.binarize_threshold)


def _manifest(args, pipeline: Pipeline):
    if args.manifest:
        return load_manifest(args.manifest)
    record = pipeline.ledger.latest_run("synth")
    if record is None:
        raise DataIOError("No --manifest given and the run directory has no synth run")
    return load_manifest(record.output("manifest"))


def _latest_output(pipeline: Pipeline, stage: str, key: str) -> str:
    record = pipeline.ledger.latest_run(stage)
    if record is None:
        raise DataIOError(f"No {stage} run in '{pipeline.run_dir}'; run the {stage} stage first")
    return record.output(key)


def _latest_pretrain(pipeline: Pipeline, arch_id: str) -> Optional[str]:
    for record in reversed(pipeline.ledger.runs("pretrain")):
        if record.config["network"]["arch_id"] == arch_id:
            return record.output("checkpoint")
    return None


# ==================== COMMANDS ====================

def cmd_synth(args, pipeline: Pipeline) -> Dict:
    manifest, record = pipeline.synthesize(_corpus_spec(args))
    print(f"Manifest: {record.output('manifest')}")
    print(f"Records:  {len(manifest)}  noise: {manifest.noise_counts()}")
    metrics = {"records": len(manifest), "noise": manifest.noise_counts()}
    if args.audit:
        audit = noise_rejection_audit(manifest, _ffs_config(args))
        print_separator()
        print(f"{'Noise mode':<16}{'Kept':>8}{'Rejected':>10}{'Keep rate':>12}")
        for mode, row in audit.items():
            print(f"{mode:<16}{row['kept']:>8}{row['rejected']:>10}{row['keep_rate']:>12.3f}")
        metrics["audit"] = audit
    return metrics


def cmd_pretrain(args, pipeline: Pipeline) -> Dict:
    manifest = _manifest(args, pipeline)
    record = pipeline.pretrain_baseline(manifest, NetworkConfig.preset(args.arch, args.seed), _train_config(args))
    print(f"Checkpoint: {record.output('checkpoint')}")
    print(f"Final loss: {record.metrics['final_loss']:.6f}")
    return record.metrics


def cmd_predict(args, pipeline: Pipeline) -> Dict:
    manifest = _manifest(args, pipeline)
    checkpoint = args.checkpoint or _latest_output(pipeline, "pretrain", "checkpoint")
    record = pipeline.predict_corpus(checkpoint, manifest, Split(args.split))
    print(f"Predictions: {record.output('predictions')} ({record.metrics['count']} maps)")
    for record_id, message in record.metrics["failed"].items():
        print(f"  failed {record_id}: {message}")
    return record.metrics


def cmd_ffs(args, pipeline: Pipeline) -> Dict:
    cfg = _ffs_config(args)
    manifest = _manifest(args, pipeline)
    predictions = args.predictions or _latest_output(pipeline, "predict", "predictions")
    record = pipeline.run_ffs(manifest, predictions, cfg)
    print(f"Keep rate: {record.metrics['keep_rate']:.4f} "
          f"({record.metrics['kept']} kept, {record.metrics['rejected']} rejected)")
    print(f"Report:    {record.output('report')}")
    print_separator()
    for mode, row in record.metrics["per_mode"].items():
        print(f"{mode:<16}{row['kept']:>6} kept {row['rejected']:>6} rejected  rate {row['keep_rate']:.3f}")
    return record.metrics


def cmd_boost(args, pipeline: Pipeline) -> Dict:
    manifest = _manifest(args, pipeline)
    ffs_record = pipeline.ledger.latest_run("ffs")
    if ffs_record is None:
        raise DataIOError("No ffs run in the run directory; run the ffs stage first")
    net_a = NetworkConfig.preset(args.arch_a, args.seed)
    net_b = NetworkConfig.preset(args.arch_b, args.seed)
    init = None
    if args.warm_start:
        init = {arch: path for arch in {args.arch_a, args.arch_b}
                if (path := _latest_pretrain(pipeline, arch)) is not None}
        if not init:
            logger.warning("No baseline checkpoint found for warm start; training from scratch")
    record = pipeline.boost_train(manifest, ffs_record, net_a, net_b, _train_config(args),
                                  use_ic=not args.no_ic, init=init)
    print(f"Network A: {record.output('checkpoint_a')}")
    print(f"Network B: {record.output('checkpoint_b')}")
    print(f"Final loss: {record.metrics['final_loss']:.6f}  (ic {record.metrics['final_ic']:.6f})")
    return record.metrics


def _parse_checkpoints(values: Optional[List[str]], pipeline: Pipeline) -> Dict[str, str]:
    if not values:
        record = pipeline.ledger.latest_run("boost")
        if record is None:
            raise DataIOError("No --checkpoint given and the run directory has no boost run")
        return {"A": record.output("checkpoint_a"), "B": record.output("checkpoint_b")}
    checkpoints = {}
    for value in values:
        name, sep, path = value.partition("=")
        if not sep:
            name, path = os.path.splitext(os.path.basename(value))[0], value
        checkpoints[name] = path
    return checkpoints


def cmd_eval(args, pipeline: Pipeline) -> Dict:
    manifest = _manifest(args, pipeline)
    checkpoints = _parse_checkpoints(args.checkpoint, pipeline)
    record = pipeline.evaluate(checkpoints, manifest, args.threshold, curves=not args.no_curves)
    print_separator()
    for name, metrics in record.metrics.items():
        print(f"{name}: wAVG dice {metrics['wavg_dice']:.4f}  iou {metrics['wavg_iou']:.4f}")
    print(f"Metrics: {record.output('metrics')}")
    return record.metrics


def cmd_curve(args, pipeline: Pipeline) -> Dict:
    if args.points < 2:
        raise ConfigError(f"--points must be at least 2, got {args.points}")
    manifest = _manifest(args, pipeline)
    checkpoint = args.checkpoint or _latest_output(pipeline, "boost", "checkpoint_a")
    state = load_checkpoint(checkpoint)
    out_dir = args.out or os.path.join(pipeline.run_dir, "curves")
    thresholds = np.linspace(0.0, 1.0, args.points)
    tests = manifest.split(Split.TEST)
    if not tests:
        raise ConfigError("Cannot draw curves: the manifest has no test records")

    curves, metrics = [], {}
    for dataset in manifest.datasets(Split.TEST):
        records = [r for r in tests if r.dataset == dataset]
        preds = [predict(state, read_image(manifest.resolve(r.image))) for r in records]
        gts = [read_mask(manifest.resolve(r.gt)) for r in records]
        curve = threshold_curve(preds, gts, thresholds, name=dataset)
        path = write_curve_csv(os.path.join(out_dir, f"{dataset}.csv"), curve)
        best_t, best_dice = curve.best()
        print(f"{dataset:<22} best dice {best_dice:.4f} at threshold {best_t:.3f}  -> {path}")
        metrics[dataset] = {"best_threshold": best_t, "best_dice": best_dice}
        curves.append(curve)
    if args.chart:
        visualizations.plot_threshold_curves(curves, os.path.join(out_dir, "curves.png"))
    return metrics


def cmd_ablate(args, pipeline: Pipeline) -> Dict:
    def train(epochs: int, lr: float) -> TrainConfig:
        return TrainConfig(epochs=epochs, batch_size=args.batch_size, seed=args.seed,
                           optimizer=AdamWConfig(lr=lr, weight_decay=args.weight_decay))

    spec = AblationSpec(
        seeds=tuple(_parse_seeds(args.seeds)),
        corpus=_corpus_spec(args),
        ffs=_ffs_config(args),
        pretrain=train(args.pretrain_epochs, args.lr),
        boost=train(args.boost_epochs, args.boost_lr),
        rounds=args.rounds,
        warm_start=args.warm_start,
        eval_threshold=args.threshold,
    )
    result = pipeline.run_ablation(spec)
    print_header("Ablation (mean over seeds)")
    print(result.table.to_string(index=False, float_format=lambda v: f"{v:.4f}"))
    print(f"\nTable:    {result.table_path}\nPer seed: {result.per_seed_path}")
    return {"table": result.table.to_dict(orient="records")}


HANDLERS = {
    "synth": cmd_synth,
    "pretrain": cmd_pretrain,
    "predict": cmd_predict,
    "ffs": cmd_ffs,
    "boost": cmd_boost,
    "eval": cmd_eval,
    "curve": cmd_curve,
    "ablate": cmd_ablate,
}


def _validate(args):
    """Build every config the command uses before any work starts"""
    if hasattr(args, "dice_threshold"):
        _ffs_config(args)
    if hasattr(args, "n_mask"):
        _corpus_spec(args)
    if hasattr(args, "epochs"):
        _train_config(args)
    if args.command == "ablate":
        StageConfig(rounds=args.rounds, eval_threshold=args.threshold)
    if args.workers < 1:
        raise ConfigError(f"--workers must be at least 1, got {args.workers}")


def dispatch(argv: Optional[List[str]] = None) -> int:
    """
    Run one subcommand

    Returns:
        0 on success, otherwise the exit code of the raised error
        (2 usage, 3 config, 4 data/IO, 5 numerical, 1 unexpected)
    """
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
        configure_logging(args.log_level)
        config = resolved_config(args)
        print_header(f"boxboost {args.command}")
        print(json.dumps(config, indent=2, sort_keys=True))
        print_separator()
        _validate(args)
        with Pipeline(args.run_dir, workers=args.workers, charts=args.chart) as pipeline:
            metrics = HANDLERS[args.command](args, pipeline)
            summary = pipeline.write_summary(config, metrics)
        print(f"\nRun summary: {summary}")
        return 0
    except BoxBoostError as e:
        sys.stderr.write(json.dumps(e.to_dict()) + "\n")
        return e.exit_code
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 0
    except Exception as e:
        logger.exception("Unexpected failure")
        sys.stderr.write(json.dumps({"error": type(e).__name__, "message": str(e), "exit_code": 1}) + "\n")
        return 1


def main():
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
