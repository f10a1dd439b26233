"""
Exception hierarchy shared by every module.
"""
from typing import Optional


class RPEFlowError(Exception):
    """Base class for all toolkit errors."""


class ShapeError(RPEFlowError):
    """Operand shapes are incompatible with the requested operation."""


class DomainError(RPEFlowError):
    """Operand values lie outside the domain of the operation."""


class GeometryError(RPEFlowError):
    """Invalid camera-space input, e.g. a point behind the camera."""


class EmptySetError(GeometryError):
    """An operation produced or received an empty point set."""


class ConfigError(RPEFlowError):
    """Invalid configuration value."""


class DataError(RPEFlowError):
    """Malformed, non-finite or unreadable data."""


class ContractError(RPEFlowError):
    """A caller broke an API contract (missing term, mismatched checkpoint, ...)."""


class EvaluationError(RPEFlowError):
    """Metrics could not be computed."""


class SpecError(RPEFlowError):
    """A scene specification could not be realized."""


class GradcheckError(RPEFlowError):
    """A gradient check failed."""


class UsageError(RPEFlowError):
    """Command-line usage error."""


class DivergenceError(RPEFlowError):
    """
    A non-finite value appeared during a forward pass or training.

    Args:
        message: Human-readable description
        level: Pyramid level where it happened, if known
        stage: Pipeline stage where it happened, if known
    """

    def __init__(self, message: str, level: Optional[int] = None, stage: Optional[str] = None):
        self.level = level
        self.stage = stage
        where = []
        if level is not None:
            where.append(f"level={level}")
        if stage is not None:
            where.append(f"stage={stage}")
        suffix = f" ({', '.join(where)})" if where else ""
        super().__init__(message + suffix)
