"""
Shared pieces of the command handlers: the Command record, common flags and
run-configuration assembly.
"""
import argparse
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, Optional

from rpeflow import storage
from rpeflow.config import settings
from rpeflow.errors import UsageError
from rpeflow.metrics import write_metrics
from rpeflow.schemas import ModelConfig, RunConfig

Handler = Callable[[argparse.Namespace, logging.Logger], int]


@dataclass(frozen=True)
class Command:
    """One sub-command: how to declare its flags and how to run it."""

    name: str
    help: str
    configure: Callable[[argparse.ArgumentParser], None]
    handler: Handler


def positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def add_io_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="run configuration JSON")
    parser.add_argument("--data", help=f"dataset directory (default: {settings.DATA_DIR})")
    parser.add_argument("--out", help=f"output directory (default: {settings.RUNS_DIR})")
    parser.add_argument("--seed", type=int, help=f"seed (default: {settings.SEED})")


def add_run_arguments(parser: argparse.ArgumentParser) -> None:
    """Flags shared by train, eval and ablate."""
    add_io_arguments(parser)
    parser.add_argument("--tiny", action="store_true", help="use the small model configuration")
    parser.add_argument("--levels", type=positive_int, help="pyramid levels (with --tiny)")
    parser.add_argument("--iterations", type=positive_int)
    parser.add_argument("--batch-size", type=positive_int)
    parser.add_argument("--lr", type=float)
    parser.add_argument("--weight-decay", type=float)
    parser.add_argument("--workers", type=positive_int)
    parser.add_argument("--alpha", type=float, help="scene-flow loss weight")
    parser.add_argument("--beta", type=float, help="feature (MI) loss weight")
    parser.add_argument("--task", choices=("joint", "2d", "3d"))
    parser.add_argument("--ii-reduce", choices=("sum", "min"))
    parser.add_argument("--no-event", action="store_true", help="zero the event voxel grid")
    parser.add_argument("--no-mi", action="store_true", help="drop the MI regularizer (beta = 0)")
    parser.add_argument("--concat-fusion", action="store_true", help="concatenation + 1×1 instead of attention")
    parser.add_argument("--f64", action="store_true", help="64-bit tensors and checkpoints")
    parser.add_argument("--log-every", type=positive_int)


def _deep_merge(base: Dict[str, Any], update: Dict[str, Any]) -> Dict[str, Any]:
    out = dict(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = value
    return out


def load_config_file(path: Optional[Path]) -> Dict[str, Any]:
    if path is None:
        return {}
    if not Path(path).exists():
        raise UsageError(f"config file {path} does not exist")
    payload = storage.read_json(path)
    if not isinstance(payload, dict):
        raise UsageError(f"config file {path} must hold a JSON object")
    return payload


def _flag_overrides(args: argparse.Namespace) -> Dict[str, Any]:
    def get(name):
        return getattr(args, name, None)

    overrides: Dict[str, Any] = {
        "command": get("command"),
        "data": get("data"),
        "out": get("out"),
        "log_every": get("log_every"),
        "optim": {
            "seed": get("seed"),
            "iterations": get("iterations"),
            "batch_size": get("batch_size"),
            "lr": get("lr"),
            "weight_decay": get("weight_decay"),
            "workers": get("workers"),
        },
        "loss": {"alpha": get("alpha"), "beta": get("beta"), "task": get("task")},
        "model": {"ii_reduce": get("ii_reduce")},
        "ablation": {
            "no_event": get("no_event") or None,
            "no_mi": get("no_mi") or None,
            "concat_fusion": get("concat_fusion") or None,
        },
        "f64": get("f64") or None,
    }

    def prune(d):
        return {k: prune(v) if isinstance(v, dict) else v for k, v in d.items()
                if v is not None and not (isinstance(v, dict) and not prune(v))}

    return prune(overrides)


def build_run_config(args: argparse.Namespace) -> RunConfig:
    """
    Defaults < ``--config`` JSON < flags.

    ``--tiny`` replaces the default model section before the file is applied.
    """
    merged: Dict[str, Any] = {}
    if getattr(args, "tiny", False):
        levels = getattr(args, "levels", None) or 2
        merged["model"] = ModelConfig.tiny(levels).model_dump()
    elif getattr(args, "levels", None):
        raise UsageError("--levels requires --tiny; set other structures in a config file")
    merged = _deep_merge(merged, load_config_file(getattr(args, "config", None)))
    merged = _deep_merge(merged, _flag_overrides(args))
    return RunConfig.model_validate(merged)


def print_json(payload: Any) -> None:
    print(json.dumps(payload, indent=2, sort_keys=True, ensure_ascii=False))


def finish(out_dir: Path) -> Path:
    """Write the run metrics next to the command's outputs."""
    return write_metrics(Path(out_dir) / settings.METRICS_FILE)
