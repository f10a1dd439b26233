"""
Tests for structured logging:
- JSON formatter fields and ordering
- Logger setup writes to stderr only
- Helper functions attach the expected extras
"""
import json
import logging

import pytest

from rpeflow.logging_utils import JSONFormatter, log_gradcheck_result, log_train_step, setup_logging


@pytest.fixture(autouse=True)
def detach_handlers():
    yield
    logging.getLogger("rpeflow").handlers.clear()


def _record(**extra):
    record = logging.LogRecord("rpeflow.test", logging.INFO, __file__, 1, "hello", None, None)
    for key, value in extra.items():
        setattr(record, key, value)
    return record


def test_formatter_emits_one_json_object():
    line = JSONFormatter().format(_record(command="train", iter=3, ignored="x"))
    payload = json.loads(line)
    assert payload["level"] == "INFO"
    assert payload["logger"] == "rpeflow.test"
    assert payload["command"] == "train" and payload["iter"] == 3
    assert payload["message"] == "hello"
    assert "ignored" not in payload
    assert payload["ts"].endswith("Z")


def test_setup_logging_uses_stderr(capsys):
    logger = setup_logging("debug")
    logger.getChild("training").info("step", extra={"command": "train"})
    captured = capsys.readouterr()
    assert captured.out == ""
    assert json.loads(captured.err.strip())["logger"] == "rpeflow.training"
    assert len(logger.handlers) == 1
    setup_logging("info")
    assert len(logger.handlers) == 1


def test_train_step_helper(capsys):
    logger = setup_logging("INFO")
    log_train_step(logger, 4, 1.5, 1.0, 50.0, 0.75, latency_ms=12.0)
    payload = json.loads(capsys.readouterr().err.strip())
    assert payload["message"] == "train_step"
    assert payload["loss_feat"] == 50.0 and payload["latency_ms"] == 12.0


def test_gradcheck_helper(capsys):
    logger = setup_logging("INFO")
    log_gradcheck_result(logger, "fusion", 2e-7, True)
    payload = json.loads(capsys.readouterr().err.strip())
    assert payload["suite"] == "fusion" and payload["passed"] is True
