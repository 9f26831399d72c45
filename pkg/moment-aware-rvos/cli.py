"""Command-line entry points.

    python cli.py synth  --out data/
    python cli.py train  --config run.json --out runs/a [--resume runs/a/checkpoint.json] [--plot]
    python cli.py infer  --checkpoint runs/a/checkpoint.json --data data/eval.json --out runs/a/masks.json
    python cli.py eval   --pred runs/a/masks.json --data data/eval.json --out runs/a/report.json
    python cli.py retrieval-eval --pred runs/a/segments.json --data data/eval.json
    python cli.py ablate --grid main --seeds 3 --out runs/ablation.json

Exit codes: 0 success, 2 configuration error, 3 data error, 4 runtime error.
"""

import os
import sys
import argparse
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple


# Add parent directory to path for imports
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

from shared import (
    Colors, atomic_write_bytes, atomic_write_json, atomic_write_text, build_identifier,
    print_colored, print_error, print_success, setup_logging,
)
from config import LOG_LEVEL, OUTPUT_DIR, RunConfig, config_hash, load_run_config
from errors import ConfigError, DataError, MomentRvosError
from dataset_io import (
    VideoSample, load_dataset, parse_predicted_masks, parse_predicted_segments, save_dataset,
    validate_dataset, write_predicted_masks, write_predicted_segments,
)
from synth_bench import generate_dataset, write_manifest
from model import SegmentationModel
from supervision_training import plot_loss_curve, train, write_loss_curve
from checkpoint import load_checkpoint, restore_model, restore_training, save_checkpoint
from keyframe_selection import RelevanceScorer, load_score_table
from evaluation import retrieval_metrics, evaluate_predictions
from experiments import GRIDS, infer_dataset, predict_retrieval, run_ablation

logger = logging.getLogger("moment_rvos.cli")


def _read_bytes(path: str, what: str) -> bytes:
    try:
        return Path(path).read_bytes()
    except FileNotFoundError:
        raise DataError(f"{what} not found: {path}") from None


def _load_split(path: Optional[str], what: str) -> List[VideoSample]:
    if not path:
        raise ConfigError(f"no {what} dataset given (use --data or dataset.{what} in the config)")
    samples = load_dataset(path)
    violations = validate_dataset(samples)
    if violations:
        raise DataError(f"{path} has {len(violations)} validation violations, first: "
                        f"{violations[0].kind} in {violations[0].video_id} ({violations[0].detail})")
    return samples


def _provenance(config: Optional[RunConfig]) -> Dict[str, str]:
    meta = {"build": build_identifier()}
    if config is not None:
        meta["config_hash"] = config_hash(config)
    return meta


def _predicted_segments_index(path: Optional[str]) -> Optional[Dict[Tuple[str, int], List[Tuple[int, int, float]]]]:
    if not path:
        return None
    return {(p.video_id, p.expression_index): p.segments
            for p in parse_predicted_segments(_read_bytes(path, "segment predictions"))}


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_synth(args: argparse.Namespace, config: RunConfig) -> int:
    out = Path(args.out or os.path.join(OUTPUT_DIR, "synth"))
    train_samples = generate_dataset(config.synth, config.seed, split="train", workers=args.workers)
    eval_samples = generate_dataset(config.synth, config.seed, split="eval", workers=args.workers)
    save_dataset(out / "train.json", train_samples)
    save_dataset(out / "eval.json", eval_samples)
    write_manifest(out / "manifest.json", config.synth, config.seed,
                   {"train": len(train_samples), "eval": len(eval_samples)})
    print_success(f"Wrote {len(train_samples)} train and {len(eval_samples)} eval videos to {out}")
    return 0


def cmd_train(args: argparse.Namespace, config: RunConfig) -> int:
    out = Path(args.out or os.path.join(OUTPUT_DIR, "train"))
    samples = _load_split(args.data or config.dataset.train, "train")
    model, optimizer, start, curve = None, None, 0, []
    if args.resume:
        checkpoint = load_checkpoint(args.resume, config, args.allow_config_mismatch)
        model, optimizer = restore_training(checkpoint, config)
        start, curve = checkpoint.step, checkpoint.loss_curve
        print_colored(f"Resuming from step {start}", Colors.OKCYAN)
    model = model or SegmentationModel(config)

    seen: List = list(curve)

    def on_step(record, opt):
        seen.append(record)
        if args.checkpoint_every and (record.step + 1) % args.checkpoint_every == 0:
            save_checkpoint(out / "checkpoint.json", config, model.params, opt, seen, record.step + 1)

    result = train(samples, config, model=model, optimizer=optimizer, start_step=start,
                   loss_curve=curve, on_step=on_step)
    save_checkpoint(out / "checkpoint.json", config, result.params, result.optimizer,
                    result.loss_curve, result.steps)
    write_loss_curve(out / "loss_curve.csv", result.loss_curve)
    if args.plot:
        plot_loss_curve(out / "loss_curve.png", result.loss_curve)
    print_success(f"Trained {result.steps} steps; checkpoint in {out / 'checkpoint.json'}")
    return 0


def cmd_infer(args: argparse.Namespace, config: Optional[RunConfig]) -> int:
    if not args.checkpoint:
        raise ConfigError("infer needs --checkpoint")
    checkpoint = load_checkpoint(args.checkpoint, config, args.allow_config_mismatch)
    config = config or checkpoint.config
    samples = _load_split(args.data or config.dataset.eval, "eval")
    model = restore_model(checkpoint, config)
    predicted = _predicted_segments_index(config.inference.segments_path)
    predictions = infer_dataset(model, samples, predicted)
    out = Path(args.out or os.path.join(OUTPUT_DIR, "masks.json"))
    atomic_write_bytes(out, write_predicted_masks(predictions))
    if args.segments_out:
        scorer = RelevanceScorer.from_config(config.inference.scorer)
        segments, _ = predict_retrieval(samples, scorer, config.inference.segment_threshold)
        atomic_write_bytes(args.segments_out, write_predicted_segments(segments))
    print_success(f"Wrote masks for {len(predictions)} expressions to {out}")
    return 0


def cmd_eval(args: argparse.Namespace, config: Optional[RunConfig]) -> int:
    samples = _load_split(args.data or (config.dataset.eval if config else None), "eval")
    predictions = parse_predicted_masks(_read_bytes(args.pred, "mask predictions"))
    tolerance = config.metrics.contour_tolerance if config else None
    workers = config.metrics.workers if config else args.workers
    report = evaluate_predictions(samples, predictions, tolerance, workers)
    report.meta.update(_provenance(config))
    if args.out:
        atomic_write_json(args.out, report.to_json())
    print(report.to_table())
    return 0


def cmd_retrieval_eval(args: argparse.Namespace, config: Optional[RunConfig]) -> int:
    samples = _load_split(args.data or (config.dataset.eval if config else None), "eval")
    predictions = parse_predicted_segments(_read_bytes(args.pred, "segment predictions"))
    top_frames = None
    if args.scores:
        table = load_score_table(args.scores)
        best = table.sort_values(["score", "frame"], ascending=[False, True]) \
                    .drop_duplicates(["video_id", "expression_index"])
        top_frames = {(str(r.video_id), int(r.expression_index)): int(r.frame) for r in best.itertuples()}
    metrics = retrieval_metrics(samples, predictions, top_frames)
    document = {"corpus": {k: 100.0 * v for k, v in metrics.items()}, **_provenance(config)}
    if args.out:
        atomic_write_json(args.out, document)
    for key, value in document["corpus"].items():
        print(f"{key:>8}  {value:6.2f}")
    return 0


def cmd_ablate(args: argparse.Namespace, config: RunConfig) -> int:
    if config.dataset.train and config.dataset.eval:
        train_samples = _load_split(config.dataset.train, "train")
        eval_samples = _load_split(config.dataset.eval, "eval")
    else:
        train_samples = generate_dataset(config.synth, config.seed, split="train", workers=args.workers)
        eval_samples = generate_dataset(config.synth, config.seed, split="eval", workers=args.workers)
    seeds = list(range(1, args.seeds + 1))
    result = run_ablation(args.grid, config, train_samples, eval_samples, seeds)
    out = Path(args.out or os.path.join(OUTPUT_DIR, f"ablation_{args.grid}.json"))
    atomic_write_json(out, {**result.to_json(), **_provenance(config)})
    atomic_write_text(out.with_suffix(".txt"), result.to_table() + "\n")
    print_colored(result.to_table(), Colors.OKGREEN)
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "retrieval-eval": cmd_retrieval_eval,
    "ablate": cmd_ablate,
}
CONFIG_OPTIONAL = {"infer", "eval", "retrieval-eval"}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="moment-rvos", description="Moment-aware video segmentation experiments")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run config JSON (defaults apply when omitted)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", help="output file or directory")
    common.add_argument("--log-level", default=LOG_LEVEL)
    common.add_argument("--workers", type=int, default=1)

    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="generate the synthetic benchmark")

    p = sub.add_parser("train", parents=[common], help="train adapter, memory and decoder")
    p.add_argument("--data", help="training dataset (default: dataset.train)")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--allow-config-mismatch", action="store_true")
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--plot", action="store_true", help="also write loss_curve.png")

    p = sub.add_parser("infer", parents=[common], help="predict masks for a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--allow-config-mismatch", action="store_true")
    p.add_argument("--data", help="dataset to segment (default: dataset.eval)")
    p.add_argument("--segments-out", help="also write scorer interval predictions here")

    p = sub.add_parser("eval", parents=[common], help="J, F and J&F of mask predictions")
    p.add_argument("--pred", required=True)
    p.add_argument("--data")

    p = sub.add_parser("retrieval-eval", parents=[common], help="R1, mAP and top-1 of interval predictions")
    p.add_argument("--pred", required=True)
    p.add_argument("--data")
    p.add_argument("--scores", help="per-frame score CSV for top-1 keyframe accuracy")

    p = sub.add_parser("ablate", parents=[common], help="run an ablation grid")
    p.add_argument("--grid", choices=GRIDS, default="main")
    p.add_argument("--seeds", type=int, default=3)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        try:
            setup_logging("moment_rvos", args.log_level)
        except ValueError as e:
            raise ConfigError(str(e)) from None
        if args.workers < 1:
            raise ConfigError("--workers must be at least 1")
        if args.command in CONFIG_OPTIONAL and args.config is None and args.seed is None:
            config = None
        else:
            config = load_run_config(args.config, args.seed)
        return COMMANDS[args.command](args, config)
    except MomentRvosError as e:
        print_error(str(e))
        return e.exit_code
    except Exception as e:
        logger.exception("Unexpected failure")
        print_error(f"Error: {str(e)}")
        return 4


if __name__ == "__main__":
    exit(main())
