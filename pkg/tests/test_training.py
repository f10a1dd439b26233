"""
Tests for training and evaluation:
- CSV log, best and final checkpoints
- Resume continues bit-exactly and rejects mismatched runs
- MI ablation and beta = 0 leave the MI heads untouched
- Worker count does not change gradients
- Oracle evaluation, checkpoint evaluation and stored predictions
"""
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest

from rpeflow import storage
from rpeflow.errors import ContractError
from rpeflow.pyramid import build_parameters
from rpeflow.scenegen import SceneSpec, make_dataset
from rpeflow.schemas import AblationFlags, LossWeights, ModelConfig, OptimizerSettings, RunConfig
from rpeflow.tensor import default_dtype
from rpeflow.training import (
    BEST_CHECKPOINT,
    FINAL_CHECKPOINT,
    TRAIN_LOG,
    batch_step,
    evaluate_run,
    load_dataset,
    prepare,
    read_predictions,
    sample_step,
    train,
    write_predictions,
)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    make_dataset(3, root, seed=0, train_ratio=0.67,
                 template=SceneSpec(width=16, height=16, num_points=64, substeps=4))
    return root


def run_config(data, out, iterations=3, **kw):
    return RunConfig(
        data=str(data),
        out=str(out),
        model=ModelConfig.tiny(2),
        optim=OptimizerSettings(iterations=iterations, batch_size=1, seed=0, workers=1),
        f64=True,
        log_every=1,
        **kw,
    )


def test_train_writes_log_and_checkpoints(dataset, tmp_path):
    result = train(run_config(dataset, tmp_path))
    rows = storage.read_train_log(tmp_path / TRAIN_LOG)
    assert [r["iter"] for r in rows] == [0.0, 1.0, 2.0]
    assert all(np.isfinite(r["L"]) for r in rows)
    final = storage.load_checkpoint(tmp_path / FINAL_CHECKPOINT)
    assert final.step == 3 and final.dtype == "float64"
    best = storage.load_checkpoint(tmp_path / BEST_CHECKPOINT)
    assert best.step == min(range(3), key=lambda i: rows[i]["L"])
    assert result.best_loss == min(r["L"] for r in rows)


def test_resume_is_bit_exact(dataset, tmp_path):
    straight = tmp_path / "straight"
    train(run_config(dataset, straight, iterations=4))
    split = tmp_path / "split"
    train(run_config(dataset, split, iterations=2))
    train(run_config(dataset, split, iterations=4), resume=split / FINAL_CHECKPOINT)

    a = storage.load_checkpoint(straight / FINAL_CHECKPOINT)
    b = storage.load_checkpoint(split / FINAL_CHECKPOINT)
    for name in a.params:
        np.testing.assert_array_equal(a.params[name], b.params[name])
    assert [r["L"] for r in storage.read_train_log(straight / TRAIN_LOG)] == \
        [r["L"] for r in storage.read_train_log(split / TRAIN_LOG)]


def test_resume_keeps_best_over_whole_log(dataset, tmp_path):
    train(run_config(dataset, tmp_path, iterations=2))
    result = train(run_config(dataset, tmp_path, iterations=4), resume=tmp_path / FINAL_CHECKPOINT)
    losses = [r["L"] for r in storage.read_train_log(tmp_path / TRAIN_LOG)]
    assert len(losses) == 4
    best = storage.load_checkpoint(tmp_path / BEST_CHECKPOINT)
    assert best.step == min(range(4), key=lambda i: losses[i])
    assert result.best_loss == min(losses) == best.best_loss


def test_resume_does_not_replace_a_better_earlier_checkpoint(dataset, tmp_path):
    train(run_config(dataset, tmp_path, iterations=2))
    before = storage.load_checkpoint(tmp_path / BEST_CHECKPOINT)
    final = storage.load_checkpoint(tmp_path / FINAL_CHECKPOINT)
    # every logged loss is positive, so no later iteration can beat zero
    final.best_loss = 0.0
    storage.save_checkpoint(tmp_path / FINAL_CHECKPOINT, final)

    result = train(run_config(dataset, tmp_path, iterations=4), resume=tmp_path / FINAL_CHECKPOINT)
    assert result.best_loss == 0.0
    assert storage.load_checkpoint(tmp_path / BEST_CHECKPOINT).step == before.step


def test_resume_rejects_mismatched_runs(dataset, tmp_path):
    train(run_config(dataset, tmp_path, iterations=1))
    ckpt = tmp_path / FINAL_CHECKPOINT
    with pytest.raises(ContractError, match="ablation"):
        train(run_config(dataset, tmp_path / "b", iterations=2, ablation=AblationFlags(no_event=True)), resume=ckpt)
    with pytest.raises(ContractError, match="float64"):
        cfg = run_config(dataset, tmp_path / "c", iterations=2).model_copy(update={"f64": False})
        train(cfg, resume=ckpt)
    with pytest.raises(ContractError, match="already at iteration"):
        train(run_config(dataset, tmp_path / "d", iterations=1), resume=ckpt)


def test_no_mi_ablation_trains_on_task_loss_only(dataset, tmp_path):
    result = train(run_config(dataset, tmp_path, iterations=2, ablation=AblationFlags(no_mi=True)))
    for row in result.history:
        assert row["L"] == row["L_task"]
        assert row["L_feat"] == 0.0


@pytest.fixture(scope="module")
def prepared(dataset):
    cfg = ModelConfig.tiny(2)
    with default_dtype(np.float64):
        names, samples = load_dataset(dataset, "train")
        items = prepare(names, samples, cfg)
        store = build_parameters(cfg, np.random.default_rng(0))
    return cfg, items, store


def test_beta_zero_leaves_mi_heads_without_gradient(prepared):
    cfg, items, store = prepared
    with default_dtype(np.float64):
        res = sample_step(items[0], store, cfg, LossWeights(beta=0.0))
    grads = dict(zip(store.names(), res.grads))
    mi = [name for name in grads if ".mi." in name]
    assert mi
    assert all(not grads[name].any() for name in mi)
    assert any(grads[name].any() for name in grads if name.startswith("enc."))


def test_worker_count_does_not_change_gradients(prepared):
    cfg, items, store = prepared
    with default_dtype(np.float64):
        serial = batch_step(items, store, cfg, LossWeights())
        with ThreadPoolExecutor(max_workers=2) as pool:
            threaded = batch_step(items, store, cfg, LossWeights(), pool)
    assert serial.loss == threaded.loss
    for a, b in zip(serial.grads, threaded.grads):
        np.testing.assert_array_equal(a, b)


def test_oracle_evaluation_is_perfect(dataset):
    result = evaluate_run(dataset, "val", oracle=True)
    assert result.mean.epe2d == 0.0
    assert result.mean.epe3d_full == 0.0
    assert result.mean.acc1px == 1.0


def test_evaluation_needs_checkpoint(dataset):
    with pytest.raises(ContractError):
        evaluate_run(dataset, "val")


def test_checkpoint_evaluation_and_predictions(dataset, tmp_path):
    train(run_config(dataset, tmp_path, iterations=1))
    result = evaluate_run(dataset, "val", checkpoint=tmp_path / FINAL_CHECKPOINT)
    assert list(result.reports) == ["sample_0002"]
    assert result.to_dict()["mean"]["epe2d"] >= 0.0

    pred_dir = write_predictions(tmp_path, result)
    sample = storage.read_sample(dataset / "sample_0002")
    flow, sceneflow = read_predictions(pred_dir, "sample_0002", sample)
    assert flow.shape == (16, 16, 2) and sceneflow.shape == (64, 3)

    with pytest.raises(ContractError):
        evaluate_run(dataset, "val", checkpoint=tmp_path / FINAL_CHECKPOINT, model_cfg=ModelConfig.tiny(3))


@pytest.mark.slow
def test_toy_overfit_reaches_target_error(tmp_path):
    data = tmp_path / "data"
    make_dataset(4, data, seed=0, train_ratio=1.0,
                 template=SceneSpec(width=16, height=16, num_points=64, substeps=4))
    cfg = run_config(data, tmp_path / "run", iterations=500)
    cfg.optim.lr = 3e-3
    result = train(cfg)
    first, last = result.history[0], result.history[-1]
    assert last["L_task"] < 0.5 * first["L_task"]
    assert last["EPE2D_train"] < 0.5

    scored = evaluate_run(data, "train", checkpoint=result.checkpoint)
    assert scored.mean.epe2d < 0.5
    assert scored.mean.epe3d_full < 0.02

