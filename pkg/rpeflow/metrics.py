"""
Prometheus-style run metrics (counters and latency summaries).

Evaluation metrics such as EPE live in ``rpeflow.objectives``; this module only
tracks how a run went.
"""
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import DefaultDict, Dict, List, Optional, Tuple

LabelKey = Tuple[Tuple[str, str], ...]


@dataclass
class Summary:
    count: int = 0
    total: float = 0.0

    def observe(self, value: float) -> None:
        self.count += 1
        self.total += value


def _label_key(labels: Optional[Dict[str, str]]) -> LabelKey:
    return tuple(sorted(labels.items())) if labels else ()


def _series(name: str, key: LabelKey) -> str:
    if not key:
        return name
    return name + "{" + ",".join(f'{k}="{v}"' for k, v in key) + "}"


class MetricsCollector:
    """
    Counters and summaries keyed by metric name and sorted label pairs.

    Only the main thread records; worker threads return timings to it.
    """

    def __init__(self):
        self.counters: DefaultDict[str, DefaultDict[LabelKey, float]] = defaultdict(lambda: defaultdict(float))
        self.summaries: DefaultDict[str, DefaultDict[LabelKey, Summary]] = defaultdict(lambda: defaultdict(Summary))

    def increment_counter(self, name: str, labels: Optional[Dict[str, str]] = None, value: float = 1.0):
        self.counters[name][_label_key(labels)] += value

    def observe_summary(self, name: str, value: float, labels: Optional[Dict[str, str]] = None):
        self.summaries[name][_label_key(labels)].observe(value)

    def reset(self):
        self.counters.clear()
        self.summaries.clear()

    def get_metrics(self) -> str:
        """Exposition text: one ``# TYPE`` line per family, series sorted by labels."""
        lines: List[str] = []
        for name in sorted(self.counters):
            lines.append(f"# TYPE {name} counter")
            for key, value in sorted(self.counters[name].items()):
                lines.append(f"{_series(name, key)} {value}")
        for name in sorted(self.summaries):
            lines.append(f"# TYPE {name} summary")
            for key, s in sorted(self.summaries[name].items()):
                lines.append(f"{_series(name + '_count', key)} {s.count}")
                lines.append(f"{_series(name + '_sum', key)} {s.total}")
        return "\n".join(lines) + "\n"


# Global metrics instance
metrics = MetricsCollector()


def record_iteration(loss: float, command: str = "train"):
    """
    Record one optimizer iteration.

    Args:
        loss: Total loss of the iteration
        command: Command that ran the iteration
    """
    metrics.increment_counter("rpeflow_iterations_total", labels={"command": command})
    metrics.observe_summary("rpeflow_loss", loss, labels={"command": command})


def record_stage_latency(stage: str, latency_ms: float):
    """
    Record a latency observation for a pipeline stage.

    Args:
        stage: Stage name, e.g. "forward", "backward", "step"
        latency_ms: Latency in milliseconds
    """
    metrics.observe_summary("rpeflow_stage_latency_ms", latency_ms, labels={"stage": stage})


def record_samples(command: str, count: int = 1):
    """
    Record processed samples.

    Args:
        command: One of "gen", "train", "eval", "viz"
        count: Number of samples
    """
    metrics.increment_counter("rpeflow_samples_total", labels={"command": command}, value=float(count))


def record_gradcheck(suite: str, passed: bool):
    """
    Record a gradient-check suite outcome.

    Args:
        suite: Suite name
        passed: Whether the suite passed
    """
    metrics.increment_counter(
        "rpeflow_gradcheck_total",
        labels={"suite": suite, "result": "pass" if passed else "fail"},
    )


def get_metrics() -> str:
    """
    Get Prometheus-style metrics output.

    Returns:
        String in Prometheus exposition format
    """
    return metrics.get_metrics()


def write_metrics(path: Path) -> Path:
    """
    Write the exposition text to ``path``.

    Args:
        path: Destination file

    Returns:
        The path written
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(get_metrics(), encoding="utf-8")
    return path
