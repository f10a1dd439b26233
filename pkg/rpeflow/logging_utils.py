"""
Structured JSON logging utilities.
"""
import json
import logging
import sys
from datetime import datetime, timezone
from typing import Any, Dict, Optional

# Structured fields copied from LogRecord extras, in output order
STRUCTURED_FIELDS = (
    "command",
    "iter",
    "level_index",
    "stage",
    "loss",
    "loss_task",
    "loss_feat",
    "epe2d",
    "sample",
    "path",
    "latency_ms",
    "suite",
    "max_rel_error",
    "passed",
    "exit_code",
)


class JSONFormatter(logging.Formatter):
    """Custom formatter that outputs logs as JSON (one object per line)."""

    def format(self, record: logging.LogRecord) -> str:
        """Format log record as JSON."""
        log_data: Dict[str, Any] = {
            "ts": datetime.now(timezone.utc).isoformat().replace("+00:00", "Z"),
            "level": record.levelname,
            "logger": record.name,
        }

        for field in STRUCTURED_FIELDS:
            if hasattr(record, field):
                log_data[field] = getattr(record, field)

        if record.getMessage():
            log_data["message"] = record.getMessage()

        if record.exc_info:
            log_data["exception"] = self.formatException(record.exc_info)

        return json.dumps(log_data, ensure_ascii=False, default=float)


def setup_logging(level: str = "INFO") -> logging.Logger:
    """
    Set up structured JSON logging for the ``rpeflow`` logger tree.

    Logs go to stderr so that stdout stays free for tables and JSON reports.

    Args:
        level: Logging level (DEBUG, INFO, WARNING, ERROR, CRITICAL)

    Returns:
        Configured logger instance
    """
    logger = logging.getLogger("rpeflow")
    logger.setLevel(getattr(logging, level.upper()))

    logger.handlers.clear()

    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(JSONFormatter())
    logger.addHandler(handler)

    logger.propagate = False

    return logger


def log_train_step(
    logger: logging.Logger,
    iteration: int,
    loss: float,
    loss_task: float,
    loss_feat: float,
    epe2d: float,
    latency_ms: Optional[float] = None,
):
    """
    Log one optimizer step with structured JSON.

    Args:
        logger: Logger instance
        iteration: Zero-based iteration index
        loss: Total loss
        loss_task: Task loss
        loss_feat: Feature (mutual information) loss
        epe2d: Training EPE2D of the batch
        latency_ms: Wall time of the step
    """
    extra = {
        "command": "train",
        "iter": iteration,
        "loss": loss,
        "loss_task": loss_task,
        "loss_feat": loss_feat,
        "epe2d": epe2d,
    }
    if latency_ms is not None:
        extra["latency_ms"] = latency_ms
    logger.info("train_step", extra=extra)


def log_gradcheck_result(logger: logging.Logger, suite: str, max_rel_error: float, passed: bool):
    """
    Log the outcome of one gradient-check suite.

    Args:
        logger: Logger instance
        suite: Suite name
        max_rel_error: Largest relative error seen
        passed: Whether the suite passed its tolerance
    """
    logger.info(
        "gradcheck_suite",
        extra={"command": "gradcheck", "suite": suite, "max_rel_error": max_rel_error, "passed": passed},
    )


def log_sample_written(logger: logging.Logger, sample: str, path: str):
    """
    Log that a generated sample was written to disk.

    Args:
        logger: Logger instance
        sample: Sample name, e.g. ``sample_0003``
        path: Directory the sample was written to
    """
    logger.info("sample_written", extra={"command": "gen", "sample": sample, "path": path})
