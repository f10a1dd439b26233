"""
Finite-difference gradient checking.
"""
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from rpeflow.errors import ShapeError
from rpeflow.tensor import Tape, Tensor, no_grad

DEFAULT_H = 1e-5
DEFAULT_TOL = 1e-4
# Denominator floor for the relative error so near-zero gradients are compared absolutely
REL_FLOOR = 1e-3


@dataclass
class GradcheckReport:
    """Outcome of comparing tape gradients against central differences."""

    name: str
    max_rel_error: float
    passed: bool
    tol: float
    checked: int
    worst_location: Optional[str] = None
    failure: Optional[str] = None
    errors: List[float] = field(default_factory=list, repr=False)

    def to_dict(self) -> Dict[str, object]:
        return {
            "name": self.name,
            "max_rel_error": self.max_rel_error,
            "passed": self.passed,
            "tol": self.tol,
            "checked": self.checked,
            "worst_location": self.worst_location,
            "failure": self.failure,
        }


def relative_error(analytic: float, numeric: float, floor: float = REL_FLOOR) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def _scalar(out: Tensor) -> float:
    if out.size != 1:
        raise ShapeError(f"gradcheck function must return a scalar, got shape {out.shape}")
    return float(out.values.reshape(()))


def check_locations(
    f: Callable[[], Tensor],
    targets: Sequence[Tuple[str, Tensor]],
    locations: Sequence[Tuple[int, int]],
    h: float = DEFAULT_H,
    tol: float = DEFAULT_TOL,
    name: str = "gradcheck",
) -> GradcheckReport:
    """
    Compare tape gradients of ``f()`` with central differences at chosen entries.

    Args:
        f: Zero-argument function building a scalar from the target tensors
        targets: (label, tensor) pairs; tensors must require gradients
        locations: (target index, flat element index) pairs to perturb
        h: Finite-difference step
        tol: Pass threshold on the maximum relative error
        name: Report label

    Returns:
        GradcheckReport
    """
    tensors = [t for _, t in targets]
    with Tape() as tape:
        out = f()
    _scalar(out)
    analytic = tape.gradients(out, tensors)

    for (label, _), grad in zip(targets, analytic):
        bad = ~np.isfinite(grad)
        if bad.any():
            where = np.unravel_index(int(np.argmax(bad)), grad.shape)
            at = f"{label}{[int(i) for i in where]}"
            return GradcheckReport(
                name=name, max_rel_error=float("inf"), passed=False, tol=tol, checked=0,
                worst_location=at, failure=f"non-finite gradient at {at}",
            )

    errors: List[float] = []
    worst, worst_at = -1.0, None
    for ti, flat in locations:
        label, t = targets[ti]
        base = t.numpy()
        idx = np.unravel_index(flat, base.shape) if base.ndim else ()
        with no_grad():
            plus = base.copy()
            plus[idx] += h
            t.assign(plus)
            f_plus = _scalar(f())
            minus = base.copy()
            minus[idx] -= h
            t.assign(minus)
            f_minus = _scalar(f())
            t.assign(base)
        numeric = (f_plus - f_minus) / (2.0 * h)
        a = float(analytic[ti][idx])
        err = relative_error(a, numeric)
        errors.append(err)
        if not np.isfinite(err) or err > worst:
            worst, worst_at = err, f"{label}{[int(i) for i in idx]}"

    max_err = float(max(errors)) if errors else 0.0
    passed = bool(errors) and np.isfinite(max_err) and max_err <= tol
    return GradcheckReport(
        name=name, max_rel_error=max_err, passed=passed, tol=tol,
        checked=len(errors), worst_location=worst_at, errors=errors,
    )


def gradcheck(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float = DEFAULT_H,
    tol: float = DEFAULT_TOL,
    name: str = "gradcheck",
) -> GradcheckReport:
    """
    Check d f(x) / d x over every element of ``x``.

    Args:
        f: Differentiable scalar-valued function of one tensor
        x: Finite input; marked as requiring a gradient for the check
        h: Finite-difference step
        tol: Pass threshold on the maximum relative error

    Returns:
        GradcheckReport; ``passed`` iff the max relative error is <= tol
    """
    x.requires_grad = True
    locations = [(0, i) for i in range(x.size)]
    return check_locations(lambda: f(x), [("x", x)], locations, h=h, tol=tol, name=name)


def gradcheck_params(
    f: Callable[[], Tensor],
    params: Dict[str, Tensor],
    sample_size: int = 50,
    seed: int = 0,
    h: float = DEFAULT_H,
    tol: float = DEFAULT_TOL,
    name: str = "params",
) -> GradcheckReport:
    """
    Check a scalar loss against a random subset of parameter entries.

    Args:
        f: Zero-argument loss closure over ``params``
        params: Named parameters (must require gradients)
        sample_size: Number of (parameter, entry) pairs drawn without replacement
        seed: Seed for the draw

    Returns:
        GradcheckReport
    """
    targets = list(params.items())
    sizes = np.array([t.size for _, t in targets])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    rng = np.random.default_rng(seed)
    draw = rng.choice(int(offsets[-1]), size=min(sample_size, int(offsets[-1])), replace=False)
    draw.sort()
    locations = []
    for flat in draw:
        ti = int(np.searchsorted(offsets, flat, side="right") - 1)
        locations.append((ti, int(flat - offsets[ti])))
    return check_locations(f, targets, locations, h=h, tol=tol, name=name)
