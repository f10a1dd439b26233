"""
Training and evaluation loops over on-disk datasets.
"""
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from rpeflow import storage
from rpeflow.errors import ContractError, DataError, DivergenceError
from rpeflow.logging_utils import log_train_step
from rpeflow.metrics import record_iteration, record_samples, record_stage_latency
from rpeflow.nn import Adam, ParameterStore
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
from rpeflow.pyramid import ModelInputs, build_parameters, forward
from rpeflow.sample import Sample
from rpeflow.schemas import AblationFlags, LossWeights, ModelConfig, RunConfig
from rpeflow.tensor import Tape, default_dtype, no_grad

logger = logging.getLogger("rpeflow.training")

TRAIN_LOG = "train_log.csv"
FINAL_CHECKPOINT = "checkpoint_final"
BEST_CHECKPOINT = "checkpoint_best"
PREDICTIONS_DIR = "predictions"


def run_dtype(f64: bool) -> np.dtype:
    return np.dtype(np.float64 if f64 else np.float32)


@dataclass
class PreparedSample:
    """One sample turned into network inputs plus per-level targets."""

    name: str
    inputs: ModelInputs
    gt: GroundTruth
    targets: Dict[int, LevelTarget]


@dataclass
class StepResult:
    grads: List[np.ndarray]
    loss: float
    loss_task: float
    loss_feat: float
    epe2d: float


@dataclass
class TrainResult:
    iterations: int
    final_loss: float
    best_loss: float
    final_epe2d: float
    checkpoint: Path
    best_checkpoint: Path
    history: List[Dict[str, float]] = field(default_factory=list, repr=False)


def load_dataset(data_dir: Union[str, Path], split: str) -> Tuple[List[str], List[Sample]]:
    """Sample names and samples of one split, in manifest order."""
    manifest = storage.read_manifest(data_dir)
    names = manifest["splits"].get(split)
    if names is None:
        raise DataError(f"dataset {data_dir} has no split {split!r}")
    return list(names), storage.load_split(data_dir, split)


def prepare(names: Sequence[str], samples: Sequence[Sample], config: ModelConfig,
            no_event: bool = False) -> List[PreparedSample]:
    prepared = []
    for name, sample in zip(names, samples):
        inputs = ModelInputs.from_sample(sample, config, no_event=no_event)
        inputs.check(config)
        gt = GroundTruth.from_sample(sample)
        prepared.append(PreparedSample(name, inputs, gt, level_targets(gt, inputs.pyr1)))
    return prepared


def _epe2d(flow: np.ndarray, gt: GroundTruth) -> float:
    err = np.linalg.norm(np.asarray(flow, dtype=np.float64) - gt.flow, axis=-1)
    valid = gt.valid.astype(bool)
    return float(err[valid].mean()) if valid.any() else 0.0


def sample_step(item: PreparedSample, store: ParameterStore, config: ModelConfig,
                weights: LossWeights) -> StepResult:
    """Forward and backward on one sample with its own tape; ``.grad`` is untouched."""
    params = store.tensors()
    with Tape() as tape:
        out = forward(item.inputs, store, config, compute_mi=weights.beta > 0)
        l_task = task_loss(out.estimates, item.targets, weights)
        l_feat = feature_loss(out.mi_terms)
        loss = total_loss(l_task, l_feat, weights.beta)
    grads = tape.gradients(loss, params)
    return StepResult(grads, loss.item(), l_task.item(), l_feat.item(), _epe2d(out.full.flow.values, item.gt))


def batch_step(batch: Sequence[PreparedSample], store: ParameterStore, config: ModelConfig,
               weights: LossWeights, pool: Optional[ThreadPoolExecutor] = None) -> StepResult:
    """
    Mean loss and gradient over ``batch``.

    Per-sample gradients are reduced in batch order whether or not a pool is used,
    so results do not depend on the worker count.
    """
    if pool is None:
        results = [sample_step(item, store, config, weights) for item in batch]
    else:
        results = list(pool.map(lambda item: sample_step(item, store, config, weights), batch))
    scale = 1.0 / len(results)
    grads = [g.copy() for g in results[0].grads]
    for res in results[1:]:
        for acc, g in zip(grads, res.grads):
            acc += g
    grads = [g * scale for g in grads]
    return StepResult(
        grads,
        sum(r.loss for r in results) * scale,
        sum(r.loss_task for r in results) * scale,
        sum(r.loss_feat for r in results) * scale,
        sum(r.epe2d for r in results) * scale,
    )


def checkpoint_config(model: ModelConfig, weights: LossWeights, ablation: AblationFlags) -> Dict[str, object]:
    return {"model": model.model_dump(), "loss": weights.model_dump(), "ablation": ablation.model_dump()}


def _save(directory: Path, store: ParameterStore, optimizer: Adam, config: Dict[str, object],
          step: int, dtype: np.dtype, best_loss: float) -> Path:
    return storage.save_checkpoint(
        directory,
        storage.Checkpoint(store.state(), optimizer.state(), config, step, dtype.name,
                           best_loss if math.isfinite(best_loss) else None),
    )


def _check_resume(ckpt: storage.Checkpoint, config: Dict[str, object], dtype: np.dtype) -> None:
    if ckpt.config.get("model") != config["model"]:
        raise ContractError("checkpoint was trained with a different model configuration")
    if ckpt.config.get("ablation") != config["ablation"]:
        raise ContractError("checkpoint was trained with different ablation flags")
    if ckpt.dtype != dtype.name:
        raise ContractError(f"checkpoint is {ckpt.dtype}, run is {dtype.name}; pass --f64 consistently")


def train(run: RunConfig, resume: Optional[Union[str, Path]] = None) -> TrainResult:
    """
    Minimize the total loss on the train split of ``run.data``.

    Iteration i uses samples (i·B + j) mod n for j < B. The best checkpoint holds
    the parameters that produced the lowest logged loss; the final one holds the
    parameters after the last update.

    Args:
        run: Validated run configuration
        resume: Checkpoint directory to continue from

    Returns:
        TrainResult with checkpoint paths and per-iteration history

    Raises:
        DivergenceError: on a non-finite loss or gradient
        ContractError: when the resume checkpoint does not fit the run
    """
    dtype = run_dtype(run.f64)
    model_cfg, weights, opt = run.effective_model(), run.effective_loss(), run.optim
    out_dir = Path(run.out)
    config = checkpoint_config(model_cfg, weights, run.ablation)

    with default_dtype(dtype):
        names, samples = load_dataset(run.data, "train")
        items = prepare(names, samples, model_cfg, no_event=run.ablation.no_event)
        store = build_parameters(model_cfg, np.random.default_rng(opt.seed))
        optimizer = Adam(store, lr=opt.lr, weight_decay=opt.weight_decay)
        start = 0
        history: List[Dict[str, float]] = []
        best_loss = math.inf
        if resume is not None:
            ckpt = storage.load_checkpoint(resume)
            _check_resume(ckpt, config, dtype)
            store.load_state(ckpt.params)
            optimizer.load_state(ckpt.optimizer, ckpt.step)
            start = ckpt.step
            if ckpt.best_loss is not None:
                best_loss = ckpt.best_loss
            logger.info("resumed from checkpoint", extra={"command": "train", "iter": start, "path": str(resume)})
        if start >= opt.iterations:
            raise ContractError(f"checkpoint is already at iteration {start}; raise --iterations to continue")

        logger.info(
            "training started",
            extra={"command": "train", "path": str(out_dir), "iter": start},
        )
        n = len(items)
        best_dir = out_dir / BEST_CHECKPOINT
        pool = ThreadPoolExecutor(max_workers=opt.workers) if opt.workers > 1 else None
        try:
            with storage.TrainLog(out_dir / TRAIN_LOG, append=resume is not None) as csv_log:
                for it in range(start, opt.iterations):
                    batch = [items[(it * opt.batch_size + j) % n] for j in range(opt.batch_size)]
                    t0 = time.perf_counter()
                    try:
                        res = batch_step(batch, store, model_cfg, weights, pool)
                    except DivergenceError as exc:
                        logger.error(str(exc), extra={"command": "train", "iter": it, "stage": exc.stage})
                        raise
                    if not all(np.all(np.isfinite(g)) for g in res.grads):
                        raise DivergenceError(f"non-finite gradient at iteration {it}", stage="backward")
                    fb_ms = (time.perf_counter() - t0) * 1000.0

                    if res.loss < best_loss:
                        best_loss = res.loss
                        _save(best_dir, store, optimizer, config, it, dtype, best_loss)

                    t1 = time.perf_counter()
                    optimizer.step(dict(zip(store.names(), res.grads)))
                    step_ms = (time.perf_counter() - t1) * 1000.0

                    csv_log.append(it, res.loss, res.loss_task, res.loss_feat, res.epe2d)
                    history.append({"iter": it, "L": res.loss, "L_task": res.loss_task,
                                    "L_feat": res.loss_feat, "EPE2D_train": res.epe2d})
                    record_iteration(res.loss)
                    record_stage_latency("forward_backward", fb_ms)
                    record_stage_latency("step", step_ms)
                    record_samples("train", len(batch))
                    if it % run.log_every == 0 or it == opt.iterations - 1:
                        log_train_step(logger, it, res.loss, res.loss_task, res.loss_feat, res.epe2d,
                                       latency_ms=round(fb_ms + step_ms, 2))
        finally:
            if pool is not None:
                pool.shutdown()

        final_dir = _save(out_dir / FINAL_CHECKPOINT, store, optimizer, config, opt.iterations, dtype, best_loss)

    last = history[-1]
    logger.info("training finished", extra={"command": "train", "iter": opt.iterations, "path": str(final_dir)})
    return TrainResult(opt.iterations, last["L"], best_loss, last["EPE2D_train"], final_dir, best_dir, history)


# -- evaluation ------------------------------------------------------------


@dataclass
class EvalResult:
    split: str
    reports: Dict[str, MetricReport]
    mean: MetricReport
    predictions: Dict[str, Tuple[np.ndarray, np.ndarray]] = field(default_factory=dict, repr=False)

    def to_dict(self) -> Dict[str, object]:
        return {
            "split": self.split,
            "mean": self.mean.model_dump(),
            "samples": {name: r.model_dump() for name, r in self.reports.items()},
        }


def load_model(checkpoint: Union[str, Path], model_cfg: Optional[ModelConfig] = None
               ) -> Tuple[ParameterStore, ModelConfig, AblationFlags, np.dtype]:
    """
    Rebuild a trained network from a checkpoint.

    Args:
        checkpoint: Checkpoint directory
        model_cfg: Expected structure; defaults to the one stored in the checkpoint

    Raises:
        ContractError: when ``model_cfg`` differs from the stored configuration
    """
    ckpt = storage.load_checkpoint(checkpoint)
    stored = ModelConfig.model_validate(ckpt.config.get("model", {}))
    if model_cfg is not None and model_cfg != stored:
        raise ContractError("model configuration does not match the checkpoint")
    ablation = AblationFlags.model_validate(ckpt.config.get("ablation", {}))
    dtype = np.dtype(ckpt.dtype)
    with default_dtype(dtype):
        store = build_parameters(stored, np.random.default_rng(0))
        store.load_state(ckpt.params)
    return store, stored, ablation, dtype


def evaluate_run(
    data_dir: Union[str, Path],
    split: str = "val",
    checkpoint: Optional[Union[str, Path]] = None,
    model_cfg: Optional[ModelConfig] = None,
    oracle: bool = False,
) -> EvalResult:
    """
    Full-resolution metrics of a checkpoint on one split.

    With ``oracle`` the ground truth is scored against itself (no checkpoint needed),
    which checks the evaluation harness.
    """
    names, samples = load_dataset(data_dir, split)
    reports: Dict[str, MetricReport] = {}
    predictions: Dict[str, Tuple[np.ndarray, np.ndarray]] = {}
    if oracle:
        for name, sample in zip(names, samples):
            gt = GroundTruth.from_sample(sample)
            reports[name] = evaluate(gt.flow, gt.sceneflow, gt)
            predictions[name] = (gt.flow, gt.sceneflow)
    else:
        if checkpoint is None:
            raise ContractError("evaluation needs a checkpoint unless oracle mode is used")
        store, cfg, ablation, dtype = load_model(checkpoint, model_cfg)
        with default_dtype(dtype):
            for item in prepare(names, samples, cfg, no_event=ablation.no_event):
                t0 = time.perf_counter()
                with no_grad():
                    out = forward(item.inputs, store, cfg, compute_mi=False)
                record_stage_latency("eval_forward", (time.perf_counter() - t0) * 1000.0)
                flow = out.full.flow.values.astype(np.float64)
                sceneflow = out.full.sceneflow.values.astype(np.float64)
                reports[item.name] = evaluate(flow, sceneflow, item.gt)
                predictions[item.name] = (flow, sceneflow)
    record_samples("eval", len(reports))
    return EvalResult(split, reports, mean_report(list(reports.values())), predictions)


def write_predictions(out_dir: Union[str, Path], result: EvalResult) -> Path:
    """Store predicted flows as ``predictions/<sample>/of_pred.f32`` and ``sf_pred.f32``."""
    root = Path(out_dir) / PREDICTIONS_DIR
    for name, (flow, sceneflow) in result.predictions.items():
        storage.write_array(root / name / "of_pred.f32", flow, "<f4")
        storage.write_array(root / name / "sf_pred.f32", sceneflow, "<f4")
    return root


def read_predictions(pred_dir: Union[str, Path], name: str, sample: Sample) -> Tuple[np.ndarray, np.ndarray]:
    d = Path(pred_dir) / name
    flow = storage.read_array(d / "of_pred.f32", "<f4", (sample.height, sample.width, 2))
    sceneflow = storage.read_array(d / "sf_pred.f32", "<f4", (sample.num_points, 3))
    return flow.astype(np.float64), sceneflow.astype(np.float64)
