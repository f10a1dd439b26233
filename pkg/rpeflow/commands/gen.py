"""
gen: synthetic dataset generation.
"""
import argparse
import logging
from pathlib import Path

from rpeflow.commands.common import Command, finish, print_json
from rpeflow.config import settings
from rpeflow.errors import UsageError
from rpeflow.scenegen import SceneSpec, make_dataset


def configure(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--count", type=int, required=True, help="number of samples")
    parser.add_argument("--out", help=f"dataset directory (default: {settings.DATA_DIR})")
    parser.add_argument("--seed", type=int, help=f"dataset seed (default: {settings.SEED})")
    parser.add_argument("--train-ratio", type=float, default=0.75)
    parser.add_argument("--width", type=int)
    parser.add_argument("--height", type=int)
    parser.add_argument("--num-points", type=int)
    parser.add_argument("--num-objects", type=int)
    parser.add_argument("--substeps", type=int)
    parser.add_argument("--speed", choices=("static", "slow", "fast"))
    parser.add_argument("--threshold", type=float, help="event contrast threshold")
    parser.add_argument("--threshold-sigma", type=float, help="per-pixel threshold mismatch")


def handle(args: argparse.Namespace, logger: logging.Logger) -> int:
    if args.count < 1:
        raise UsageError(f"--count must be at least 1, got {args.count}")
    fields = {
        "width": args.width,
        "height": args.height,
        "num_points": args.num_points,
        "num_objects": args.num_objects,
        "substeps": args.substeps,
        "speed": args.speed,
        "threshold": args.threshold,
        "threshold_sigma": args.threshold_sigma,
    }
    template = SceneSpec(**{k: v for k, v in fields.items() if v is not None})
    out_dir = Path(args.out or settings.DATA_DIR)
    seed = settings.SEED if args.seed is None else args.seed

    logger.info("generating dataset", extra={"command": "gen", "path": str(out_dir)})
    manifest = make_dataset(args.count, out_dir, seed=seed, train_ratio=args.train_ratio, template=template)
    finish(out_dir)
    print_json({
        "path": str(out_dir),
        "seed": manifest["seed"],
        "count": manifest["count"],
        "train": len(manifest["splits"]["train"]),
        "val": len(manifest["splits"]["val"]),
    })
    return 0


command = Command("gen", "generate a synthetic dataset", configure, handle)
