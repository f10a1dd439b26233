"""
Tests for losses and metrics:
- Task loss against a hand re-summation, task selection and raw sums
- Feature loss completeness and level weighting
- Total loss with beta = 0 and divergence detection
- Level targets and full-resolution metrics
"""
import numpy as np
import pytest

from rpeflow.errors import ContractError, DivergenceError, EvaluationError, ShapeError
from rpeflow.objectives import (
    GroundTruth,
    LevelTarget,
    MetricReport,
    evaluate,
    feature_loss,
    level_targets,
    mean_report,
    task_loss,
    total_loss,
)
from rpeflow.pyramid import FlowEstimate, PointLevel
from rpeflow.schemas import LossWeights
from rpeflow.tensor import Tensor


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def level_data(rng):
    estimates, targets = {}, {}
    for l, (h, w, n) in {1: (4, 6, 10), 2: (2, 3, 5)}.items():
        valid = rng.uniform(size=(h, w)) > 0.3
        targets[l] = LevelTarget(rng.standard_normal((h, w, 2)), valid, rng.standard_normal((n, 3)))
        estimates[l] = FlowEstimate(Tensor(rng.standard_normal((h, w, 2))), Tensor(rng.standard_normal((n, 3))))
    return estimates, targets


def _reference(estimates, targets, alpha, raw=False, use2d=True, use3d=True):
    total = 0.0
    for l in estimates:
        est, tgt = estimates[l], targets[l]
        e2 = np.linalg.norm(est.flow.values - tgt.flow, axis=-1)[tgt.valid].sum()
        e3 = np.linalg.norm(est.sceneflow.values - tgt.sceneflow, axis=-1).sum()
        if not raw:
            e2 /= max(tgt.valid.sum(), 1)
            e3 /= len(tgt.sceneflow)
        total += 2.0 ** (l - 2) * (use2d * e2 + use3d * alpha * e3)
    return total


def test_task_loss_matches_resummation(level_data):
    estimates, targets = level_data
    got = task_loss(estimates, targets, LossWeights(alpha=3.0)).item()
    assert got == pytest.approx(_reference(estimates, targets, 3.0))


def test_task_loss_raw_sums(level_data):
    estimates, targets = level_data
    got = task_loss(estimates, targets, LossWeights(alpha=2.0, raw_sums=True)).item()
    assert got == pytest.approx(_reference(estimates, targets, 2.0, raw=True))


@pytest.mark.parametrize("task,use2d,use3d", [("2d", True, False), ("3d", False, True)])
def test_task_selection(level_data, task, use2d, use3d):
    estimates, targets = level_data
    got = task_loss(estimates, targets, LossWeights(alpha=5.0, task=task)).item()
    assert got == pytest.approx(_reference(estimates, targets, 5.0, use2d=use2d, use3d=use3d))


def test_task_loss_is_zero_at_ground_truth(level_data):
    _, targets = level_data
    perfect = {l: FlowEstimate(Tensor(t.flow), Tensor(t.sceneflow)) for l, t in targets.items()}
    assert task_loss(perfect, targets, LossWeights()).item() == 0.0


def test_task_loss_level_mismatch(level_data):
    estimates, targets = level_data
    with pytest.raises(ShapeError):
        task_loss({1: estimates[1]}, targets, LossWeights())


def test_feature_loss_weights_levels():
    terms = {
        1: {k: Tensor(1.0) for k in ("fs1", "fs2", "ms", "es")},
        3: {k: Tensor(0.5) for k in ("fs1", "fs2", "ms", "es")},
    }
    assert feature_loss(terms).item() == pytest.approx(0.5 * 4.0 + 2.0 * 2.0)


def test_feature_loss_requires_every_term():
    with pytest.raises(ContractError, match="es"):
        feature_loss({1: {"fs1": Tensor(1.0), "fs2": Tensor(1.0), "ms": Tensor(1.0)}})


def test_total_loss():
    assert total_loss(Tensor(2.0), Tensor(5.0), 0.1).item() == pytest.approx(2.5)
    task = Tensor(2.0)
    assert total_loss(task, Tensor(5.0), 0.0) is task
    with pytest.raises(DivergenceError):
        total_loss(Tensor(np.nan), Tensor(0.0), 0.1)


def _gt(rng, h=4, w=8, n=12):
    return GroundTruth(
        flow=rng.standard_normal((h, w, 2)),
        sceneflow=rng.standard_normal((n, 3)) * 0.1,
        valid=np.ones((h, w), dtype=bool),
        occ2d=np.zeros((h, w), dtype=bool),
        occ3d=np.arange(n) % 3 == 0,
    )


def test_level_targets_average_blocks(rng):
    gt = _gt(rng)
    gt.valid[0, 0] = False
    pyr = [
        PointLevel(np.zeros((6, 3)), np.arange(0, 12, 2), np.zeros((6, 1), int), np.zeros((6, 1), int)),
        PointLevel(np.zeros((3, 3)), np.arange(0, 12, 4), np.zeros((3, 1), int), np.zeros((3, 1), int)),
    ]
    targets = level_targets(gt, pyr)
    assert targets[1].flow.shape == (2, 4, 2)
    np.testing.assert_allclose(targets[1].flow[0, 1], gt.flow[0:2, 2:4].mean(axis=(0, 1)) / 2)
    assert not targets[1].valid[0, 0] and targets[1].valid[0, 1]
    np.testing.assert_array_equal(targets[2].sceneflow, gt.sceneflow[[0, 4, 8]])


def test_evaluate_ground_truth_is_perfect(rng):
    gt = _gt(rng)
    report = evaluate(gt.flow, gt.sceneflow, gt)
    assert report.epe2d == 0.0 and report.epe3d_full == 0.0
    assert report.acc1px == 1.0 and report.acc05_nocc == 1.0


def test_evaluate_known_offsets(rng):
    gt = _gt(rng)
    flow = gt.flow.copy()
    flow[:2] += np.array([3.0, 4.0])
    sf = gt.sceneflow + np.array([0.0, 0.0, 0.1])
    report = evaluate(flow, sf, gt)
    assert report.epe2d == pytest.approx(2.5)
    assert report.acc1px == pytest.approx(0.5)
    assert report.epe3d_nocc == pytest.approx(0.1)
    assert report.acc05_full == 0.0


def test_evaluate_without_visible_points(rng):
    gt = _gt(rng)
    gt.occ3d[:] = True
    with pytest.raises(EvaluationError):
        evaluate(gt.flow, gt.sceneflow, gt)


def test_mean_report_and_rows():
    a = MetricReport(epe2d=1.0, acc1px=0.5, epe3d_nocc=0.2, acc05_nocc=0.0, epe3d_full=0.3, acc05_full=0.1)
    b = MetricReport(epe2d=3.0, acc1px=1.0, epe3d_nocc=0.4, acc05_nocc=1.0, epe3d_full=0.5, acc05_full=0.3)
    m = mean_report([a, b])
    assert m.epe2d == 2.0 and m.acc05_nocc == 0.5
    assert list(m.row()) == ["EPE2D", "ACC1px", "EPE3D^N.Occ", "ACC.05^N.Occ", "EPE3D^Full", "ACC.05^Full"]
    with pytest.raises(EvaluationError):
        mean_report([])
