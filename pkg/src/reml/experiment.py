"""Config-driven assembly of task, information access and model, plus the
end-to-end run used by ``reml run`` and ``reml eval``."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

from .access import InformationAccessModel
from .config import ExperimentConfig
from .core import Dataset
from .evaluation import extrinsic_eval, intrinsic_eval, render_table, write_report
from .models import AugmentedLinearModel, KnnInterpolatedModel, MemoryWritingModel, save_checkpoint
from .optim import MetricsWriter, TrainResult, per_example_losses, train
from .querygen import QueryStrategy
from .response import ResponseProcessor
from .retrieval import DenseRetriever, OracleRetriever, RandomRetriever
from .storage import StorageHandler, StoragePolicy
from .tasks import SyntheticTask, make_task

OUTPUT_FILES = ("metrics.jsonl", "checkpoint.json", "extrinsic.json", "intrinsic.json")


@dataclass
class Experiment:
    config: ExperimentConfig
    task: SyntheticTask
    model: Any
    access: list[InformationAccessModel]


def build(cfg: ExperimentConfig) -> Experiment:
    task = make_task(cfg.task.spec())
    coll = task.collection
    d_in = task.dataset.X.shape[1]
    d = coll.dimension
    r = cfg.retrieval
    if r.retriever == "dense":
        retriever: Any = DenseRetriever(coll, r.scoring, np.eye(d) if r.trainable_projection else None)
    elif r.retriever == "oracle":
        retriever = OracleRetriever(coll, task.relevance_map, r.noise_probability, cfg.task.seed, r.adversarial)
    else:
        retriever = RandomRetriever(coll, cfg.task.seed)
    if r.query == "linear":
        strategy = QueryStrategy("linear", np.eye(d, d_in), k_default=r.k)
    else:
        strategy = QueryStrategy("identity", k_default=r.k)
    storage = None
    if r.storage is not None or cfg.model.memory:
        policy = r.storage.policy() if r.storage is not None else StoragePolicy()
        storage = StorageHandler(coll, policy)
    append = r.append_label and cfg.task.kind != "toy_next_token"
    access = InformationAccessModel(retriever, strategy, ResponseProcessor(r.processor, r.m, append), r.k, storage)
    m = cfg.model
    if m.kind == "knn_interpolated":
        parametric = AugmentedLinearModel(
            d_in, (), task.dataset.task_kind, n_classes=cfg.task.dimension, model_id=m.model_id,
            init_scale=m.init_scale, seed=cfg.optimization.seed,
        )
        model: Any = KnnInterpolatedModel(parametric, m.lam, m.beta)
    else:
        n_classes = None if task.dataset.task_kind == "regression" else cfg.task.dimension
        model = AugmentedLinearModel.for_access(
            d_in, [access], task.dataset.task_kind, n_classes=n_classes, model_id=m.model_id,
            feedback=m.feedback, init_scale=m.init_scale, seed=cfg.optimization.seed,
        )
        if m.memory:
            model = MemoryWritingModel(model)
    return Experiment(cfg, task, model, [access])


def tune_lambda(exp: Experiment, grid: list[float], data: Dataset) -> float:
    """Pick the grid value with the lowest validation loss (first on ties)."""
    model = exp.model
    best, best_loss = model.lam, np.inf
    for lam in grid:
        model.lam = float(lam)
        loss = float(np.mean(per_example_losses(model, exp.access, data)))
        if loss < best_loss:
            best, best_loss = float(lam), loss
    model.lam = best
    return best


def evaluate(exp: Experiment, out_dir: Path) -> dict[str, Any]:
    cfg = exp.config
    test = exp.task.test
    ext = extrinsic_eval(exp.model, exp.access, test)
    n_q = min(cfg.evaluation.intrinsic_queries, len(test))
    intr = intrinsic_eval(
        exp.model, exp.access, test.subset(range(n_q)), k=cfg.evaluation.intrinsic_k, seed=cfg.optimization.seed
    )
    write_report(out_dir / "extrinsic.json", ext)
    write_report(out_dir / "intrinsic.json", intr)
    summary = ext.to_dict()
    summary.update({"intrinsic_tau": intr.tau, "utility_at_k": intr.utility_at_k})
    return summary


def run(cfg: ExperimentConfig, out_dir: str | Path) -> tuple[TrainResult, dict[str, Any]]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    exp = build(cfg)
    trainer = cfg.optimization.trainer()
    metrics = MetricsWriter(out / "metrics.jsonl")
    try:
        result = train(exp.model, exp.access, exp.task.train, trainer, val=exp.task.val, metrics=metrics)
    finally:
        metrics.close()
    if isinstance(exp.model, KnnInterpolatedModel) and cfg.evaluation.lambda_grid:
        tune_lambda(exp, cfg.evaluation.lambda_grid, exp.task.val)
    save_checkpoint(out / "checkpoint.json", exp.model, exp.access)
    summary = evaluate(exp, out)
    summary["best_val_loss"] = result.best_val_loss
    return result, summary


def summary_table(summary: dict[str, Any]) -> str:
    return render_table(summary, "evaluation (test split)")
