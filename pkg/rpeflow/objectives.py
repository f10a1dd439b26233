"""
Training losses and evaluation metrics.
"""
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from rpeflow.errors import ContractError, DivergenceError, EvaluationError, ShapeError
from rpeflow.pyramid import MI_TERMS, FlowEstimate, PointLevel
from rpeflow.sample import Sample
from rpeflow.schemas import LossWeights
from rpeflow.tensor import Tensor, as_tensor, get_default_dtype, norm, sum_, zeros

ACC_2D_THRESHOLD = 1.0
ACC_3D_THRESHOLD = 0.05

# Column labels of the metric table, in report order
METRIC_COLUMNS = {
    "epe2d": "EPE2D",
    "acc1px": "ACC1px",
    "epe3d_nocc": "EPE3D^N.Occ",
    "acc05_nocc": "ACC.05^N.Occ",
    "epe3d_full": "EPE3D^Full",
    "acc05_full": "ACC.05^Full",
}


@dataclass
class GroundTruth:
    """Full-resolution targets: flow (H×W×2), sceneflow (N×3), masks."""

    flow: np.ndarray
    sceneflow: np.ndarray
    valid: np.ndarray
    occ2d: np.ndarray
    occ3d: np.ndarray

    def __post_init__(self):
        if self.valid.shape != self.flow.shape[:2] or self.occ2d.shape != self.flow.shape[:2]:
            raise ShapeError(f"2D masks must be {self.flow.shape[:2]}")
        if self.occ3d.shape != self.sceneflow.shape[:1]:
            raise ShapeError(f"3D occlusion mask must have {len(self.sceneflow)} entries")

    @classmethod
    def from_sample(cls, sample: Sample) -> "GroundTruth":
        return cls(sample.flow, sample.sceneflow, sample.valid.astype(bool),
                   sample.occ2d.astype(bool), sample.occ3d.astype(bool))


@dataclass
class LevelTarget:
    """Targets resized to one pyramid level."""

    flow: np.ndarray
    valid: np.ndarray
    sceneflow: np.ndarray


def level_targets(gt: GroundTruth, pyr: Sequence[PointLevel]) -> Dict[int, LevelTarget]:
    """
    Resize the ground truth to every pyramid level.

    Flow is area-averaged over 2**l × 2**l blocks and divided by 2**l; a coarse
    pixel is valid when its whole block is. Scene flow is taken at each level's
    sampled points.
    """
    h, w = gt.flow.shape[:2]
    targets = {}
    for l, pts in enumerate(pyr, start=1):
        f = 2 ** l
        if h % f or w % f:
            raise ShapeError(f"ground truth {h}×{w} is not divisible by {f}")
        blocks = gt.flow.reshape(h // f, f, w // f, f, 2)
        valid = gt.valid.reshape(h // f, f, w // f, f).all(axis=(1, 3))
        targets[l] = LevelTarget(blocks.mean(axis=(1, 3)) / f, valid, gt.sceneflow[pts.global_index])
    return targets


def task_loss(
    estimates: Mapping[int, FlowEstimate],
    targets: Mapping[int, LevelTarget],
    weights: LossWeights,
    lambdas: Optional[Mapping[int, float]] = None,
) -> Tensor:
    """
    Σ_l λ_l [Σ_x ‖f_l − f_gt‖ + α Σ_p ‖s_l − s_gt‖].

    Each level's 2D sum is divided by its valid-pixel count and its 3D sum by its
    point count unless ``weights.raw_sums``; ``weights.task`` drops the 2D or 3D term.

    Args:
        estimates: Level -> predictions
        targets: Level -> resized ground truth
        weights: Loss weights
        lambdas: Optional level weights overriding 2**(l-2)
    """
    if set(estimates) != set(targets):
        raise ShapeError(f"estimate levels {sorted(estimates)} do not match target levels {sorted(targets)}")
    dtype = get_default_dtype()
    total = zeros(())
    for l in sorted(estimates):
        est, tgt = estimates[l], targets[l]
        if est.flow.shape != tgt.flow.shape or est.sceneflow.shape != tgt.sceneflow.shape:
            raise ShapeError(f"level {l}: prediction and target shapes differ")
        lam = lambdas[l] if lambdas is not None else LossWeights.level_weight(l)
        level_loss = zeros(())
        if weights.task in ("joint", "2d"):
            mask = tgt.valid.astype(dtype)
            err = sum_(norm(est.flow - tgt.flow.astype(dtype), axis=-1) * mask)
            if not weights.raw_sums:
                err = err * (1.0 / max(float(mask.sum()), 1.0))
            level_loss = level_loss + err
        if weights.task in ("joint", "3d"):
            err = sum_(norm(est.sceneflow - tgt.sceneflow.astype(dtype), axis=-1))
            if not weights.raw_sums:
                err = err * (1.0 / max(len(tgt.sceneflow), 1))
            level_loss = level_loss + weights.alpha * err
        total = total + lam * level_loss
    return total


def feature_loss(
    terms: Mapping[int, Mapping[str, Tensor]],
    lambdas: Optional[Mapping[int, float]] = None,
) -> Tensor:
    """Σ_l λ_l (fs1 + fs2 + ms + es); every level must carry all four terms."""
    total = zeros(())
    for l in sorted(terms):
        missing = [k for k in MI_TERMS if k not in terms[l]]
        if missing:
            raise ContractError(f"level {l} is missing feature terms {missing}")
        lam = lambdas[l] if lambdas is not None else LossWeights.level_weight(l)
        t = terms[l]
        total = total + lam * (((t["fs1"] + t["fs2"]) + t["ms"]) + t["es"])
    return total


def total_loss(l_task: Tensor, l_feat: Tensor, beta: float) -> Tensor:
    """L = L_task + β·L_feat; raises DivergenceError on non-finite input."""
    l_task, l_feat = as_tensor(l_task), as_tensor(l_feat)
    for name, t in (("task", l_task), ("feature", l_feat)):
        if not np.all(np.isfinite(t.values)):
            raise DivergenceError(f"{name} loss is not finite", stage="loss")
    if beta == 0:
        return l_task
    return l_task + beta * l_feat


class MetricReport(BaseModel):
    """Evaluation metrics of one sample or the mean over a split."""

    model_config = ConfigDict(extra="forbid")

    epe2d: float = Field(ge=0.0)
    acc1px: float = Field(ge=0.0, le=1.0)
    epe3d_nocc: float = Field(ge=0.0)
    acc05_nocc: float = Field(ge=0.0, le=1.0)
    epe3d_full: float = Field(ge=0.0)
    acc05_full: float = Field(ge=0.0, le=1.0)

    def row(self) -> Dict[str, float]:
        """Values keyed by table column label."""
        return {label: getattr(self, key) for key, label in METRIC_COLUMNS.items()}


def evaluate(flow_pred: np.ndarray, sceneflow_pred: np.ndarray, gt: GroundTruth) -> MetricReport:
    """
    Full-resolution metrics.

    Args:
        flow_pred: (H, W, 2) predicted optical flow
        sceneflow_pred: (N, 3) predicted scene flow of the input points
        gt: Ground truth

    Raises:
        EvaluationError: when no pixel is valid or no point is visible
    """
    flow_pred = np.asarray(flow_pred, dtype=np.float64)
    sceneflow_pred = np.asarray(sceneflow_pred, dtype=np.float64)
    if flow_pred.shape != gt.flow.shape or sceneflow_pred.shape != gt.sceneflow.shape:
        raise ShapeError("prediction shapes do not match the ground truth")
    valid = gt.valid.astype(bool)
    if not valid.any():
        raise EvaluationError("no valid pixels to evaluate")
    nocc = ~gt.occ3d.astype(bool)
    if not nocc.any() or len(gt.sceneflow) == 0:
        raise EvaluationError("no non-occluded points to evaluate")

    e2 = np.linalg.norm(flow_pred - gt.flow, axis=-1)[valid]
    e3 = np.linalg.norm(sceneflow_pred - gt.sceneflow, axis=-1)
    return MetricReport(
        epe2d=float(e2.mean()),
        acc1px=float((e2 < ACC_2D_THRESHOLD).mean()),
        epe3d_nocc=float(e3[nocc].mean()),
        acc05_nocc=float((e3[nocc] < ACC_3D_THRESHOLD).mean()),
        epe3d_full=float(e3.mean()),
        acc05_full=float((e3 < ACC_3D_THRESHOLD).mean()),
    )


def mean_report(reports: List[MetricReport]) -> MetricReport:
    """Per-metric mean over samples."""
    if not reports:
        raise EvaluationError("no reports to average")
    return MetricReport(**{k: float(np.mean([getattr(r, k) for r in reports])) for k in METRIC_COLUMNS})
