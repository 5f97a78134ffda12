"""Training regimes: independent (frozen retriever), conditional
(alternating prediction/retrieval updates), joint (end-to-end through
soft retrieval) and the weighted multi-model objective.

The optimizer is plain mini-batch gradient descent with optional
momentum. Every trainer draws batch permutations from
``default_rng(cfg.seed)`` and nothing else, so runs are bit-reproducible.
"""
from __future__ import annotations

import json
import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, TextIO

import numpy as np

from .access import InformationAccessModel
from .core import Dataset, RemlError
from .feedback import UtilityFunction, gradient_feedback, utility_feedback

REGIMES = ("independent", "conditional", "joint")

Access = Sequence[InformationAccessModel]


class TrainingDiverged(RemlError):
    def __init__(self, last_finite_loss: float | None, where: str):
        self.last_finite_loss = last_finite_loss
        super().__init__(f"training diverged at {where}; last finite loss {last_finite_loss}")


@dataclass(frozen=True)
class TrainerConfig:
    regime: str = "independent"
    learning_rate: float = 0.1
    epochs: int = 10
    batch_size: int = 32
    seed: int = 0
    momentum: float = 0.0
    conditional_rounds: int = 10
    skip_retriever_step: bool = False
    tau_start: float = 1.0
    tau_end: float = 0.1
    patience: int | None = None
    freeze: frozenset[str] = frozenset()

    def __post_init__(self) -> None:
        if self.regime not in REGIMES:
            raise ValueError(f"regime must be one of {REGIMES}, got {self.regime!r}")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.epochs < 1 or self.conditional_rounds < 1:
            raise ValueError("epochs and conditional_rounds must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if not (self.tau_start > 0 and self.tau_end > 0):
            raise ValueError("temperatures must be positive")
        if self.patience is not None and self.patience < 1:
            raise ValueError("patience must be positive")
        object.__setattr__(self, "freeze", frozenset(self.freeze))

    def tau(self, epoch: int, n_epochs: int) -> float:
        """Geometric anneal from tau_start to tau_end over n_epochs."""
        if n_epochs <= 1:
            return self.tau_start
        return self.tau_start * (self.tau_end / self.tau_start) ** (epoch / (n_epochs - 1))


@dataclass
class TrainResult:
    train_losses: list[float] = field(default_factory=list)
    val_losses: list[float] = field(default_factory=list)
    best_val_loss: float | None = None
    best_epoch: int | None = None
    metrics: list[dict[str, Any]] = field(default_factory=list)

    @property
    def epochs_run(self) -> int:
        return len(self.train_losses)


class MetricsWriter:
    """One JSON line per (epoch, split); keeps the records in memory too."""

    def __init__(self, path: str | Path | None = None):
        self.records: list[dict[str, Any]] = []
        self._fh: TextIO | None = open(path, "w", encoding="utf-8") if path is not None else None

    def write(self, epoch: int, split: str, loss: float, utility_gain_mean: float | None) -> None:
        rec = {"epoch": epoch, "split": split, "loss": loss, "utility_gain_mean": utility_gain_mean}
        self.records.append(rec)
        if self._fh is not None:
            self._fh.write(json.dumps(rec, allow_nan=False) + "\n")

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None


# -- evaluation helpers -----------------------------------------------------


def per_example_losses(model: Any, access: Access, data: Dataset, disabled: bool = False) -> np.ndarray:
    """Losses under hard retrieval (or with empty responses when disabled)."""
    pred = model.predict_batch(data.X, data.session_ids, access, disabled=disabled)
    if data.task_kind == "regression":
        return (pred - data.Y) ** 2
    p = pred[np.arange(len(data)), data.Y]
    with np.errstate(divide="ignore"):
        return -np.log(p)


def evaluate(model: Any, access: Access, data: Dataset) -> tuple[float, float]:
    """(mean loss with retrieval, mean utility gain over the disabled pass)."""
    with_r = per_example_losses(model, access, data)
    without = per_example_losses(model, access, data, disabled=True)
    # utility is the negated loss for both task families
    return float(np.mean(with_r)), float(np.mean(without - with_r))


# -- parameter plumbing -----------------------------------------------------


def _all_params(model: Any, access: Access) -> dict[str, np.ndarray]:
    theta, omega = model.parameters(access)
    return {**theta, **omega}


def _snapshot(params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: v.copy() for k, v in params.items()}


def _restore(params: dict[str, np.ndarray], snap: dict[str, np.ndarray]) -> None:
    for k, v in snap.items():
        params[k][...] = v


class _Stepper:
    def __init__(self, params: dict[str, np.ndarray], lr: float, momentum: float):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, grads: dict[str, np.ndarray], keys: set[str], scale: float = 1.0) -> None:
        for k, g in grads.items():
            if k not in keys:
                continue
            g = scale * g
            if self.momentum:
                v = self.velocity.get(k)
                g = g if v is None else self.momentum * v + g
                self.velocity[k] = g
            self.params[k] -= self.lr * g


def _check_finite(loss: float, last: float | None, where: str) -> float:
    if not math.isfinite(loss):
        raise TrainingDiverged(last, where)
    return loss


def _after_batch(model: Any, access: Access, data: Dataset, idx: np.ndarray, sessions: list[str]) -> None:
    """Memory writes and feedback emission for models that do them."""
    observe = getattr(model, "observe", None)
    wants_feedback = bool(getattr(model, "feedback", False)) and len(access) > 0
    if observe is None and not wants_feedback:
        return
    U = UtilityFunction.for_task(data.task_kind)
    for i in idx:
        ex = data[int(i)]
        if wants_feedback:
            a = access[0]
            for q in a.queries(ex.x, sessions[i], model.model_id):
                res = a.retrieve(q)
                for fb in utility_feedback(model, ex.x, ex.y, q, res, U, access):
                    a.receive_feedback(fb)
                if model.model_id in a.personalization and a.processor.differentiable:
                    a.receive_feedback(gradient_feedback(model, ex.x, ex.y, q, res, access))
        if observe is not None:
            observe(ex.x, ex.y, access, sessions[i])


def _epoch(
    model: Any,
    access: Access,
    data: Dataset,
    stepper: _Stepper,
    keys: set[str],
    cfg: TrainerConfig,
    rng: np.random.Generator,
    soft: bool,
    tau: float,
    last: float | None,
    where: str,
) -> float:
    X, Y, sessions = data.X, data.Y, data.session_ids
    perm = rng.permutation(len(data))
    total = 0.0
    for start in range(0, len(data), cfg.batch_size):
        idx = perm[start : start + cfg.batch_size]
        loss, grads = model.batch_loss_and_gradients(X[idx], Y[idx], [sessions[i] for i in idx], access, soft, tau)
        last = _check_finite(loss, last, where)
        stepper.step(grads, keys)
        for k in keys:
            if not np.all(np.isfinite(stepper.params[k])):
                raise TrainingDiverged(last, f"{where} (parameter {k})")
        _after_batch(model, access, data, idx, sessions)
        total += loss * len(idx)
    return total / len(data)


class _Tracker:
    """Validation bookkeeping: best-so-far checkpoint and patience."""

    def __init__(self, model: Any, access: Access, val: Dataset | None, params: dict[str, np.ndarray], patience: int | None):
        self.model, self.access, self.val = model, access, val
        self.params = params
        self.patience = patience
        self.best: dict[str, np.ndarray] | None = None
        self.best_loss = math.inf
        self.best_epoch: int | None = None
        self.stale = 0
        if val is not None:
            self.observe(-1)

    def observe(self, epoch: int) -> tuple[float, float] | None:
        if self.val is None:
            return None
        loss, gain = evaluate(self.model, self.access, self.val)
        if loss < self.best_loss:
            self.best_loss, self.best_epoch = loss, epoch
            self.best = _snapshot(self.params)
            self.stale = 0
        else:
            self.stale += 1
        return loss, gain

    @property
    def should_stop(self) -> bool:
        return self.patience is not None and self.stale >= self.patience

    def finish(self, result: TrainResult) -> TrainResult:
        if self.best is not None:
            _restore(self.params, self.best)
            result.best_val_loss = self.best_loss
            result.best_epoch = self.best_epoch
        return result


def _record(result: TrainResult, metrics: MetricsWriter | None, epoch: int, train_loss: float, val: tuple[float, float] | None) -> None:
    result.train_losses.append(train_loss)
    recs = [(epoch, "train", train_loss, None)]
    if val is not None:
        result.val_losses.append(val[0])
        recs.append((epoch, "val", val[0], val[1]))
    for rec in recs:
        d = dict(zip(("epoch", "split", "loss", "utility_gain_mean"), rec))
        result.metrics.append(d)
        if metrics is not None:
            metrics.write(*rec)


def _keys(params: dict[str, np.ndarray], group: dict[str, np.ndarray], freeze: frozenset[str]) -> set[str]:
    return {k for k in group if k in params and k not in freeze}


# -- trainers ---------------------------------------------------------------


def train_independent(
    model: Any,
    access: Access,
    data: Dataset,
    cfg: TrainerConfig,
    val: Dataset | None = None,
    metrics: MetricsWriter | None = None,
    soft: bool = False,
) -> TrainResult:
    """Fit the prediction parameters against a fixed retriever.

    ``soft`` feeds softmax-weighted responses (annealed per cfg) instead
    of hard top-k lists; the retriever still receives no updates.
    """
    params = _all_params(model, access)
    theta, _ = model.parameters(access)
    keys = _keys(params, theta, cfg.freeze)
    rng = np.random.default_rng(cfg.seed)
    stepper = _Stepper(params, cfg.learning_rate, cfg.momentum)
    tracker = _Tracker(model, access, val, params, cfg.patience)
    result, last = TrainResult(), None
    for epoch in range(cfg.epochs):
        tau = cfg.tau(epoch, cfg.epochs)
        last = _epoch(model, access, data, stepper, keys, cfg, rng, soft, tau, last, f"epoch {epoch}")
        _record(result, metrics, epoch, last, tracker.observe(epoch))
        if tracker.should_stop:
            break
    return tracker.finish(result)


def train_conditional(
    model: Any,
    access: Access,
    data: Dataset,
    cfg: TrainerConfig,
    val: Dataset | None = None,
    metrics: MetricsWriter | None = None,
) -> TrainResult:
    """Alternate one epoch on the prediction side with one soft-retrieval
    epoch on the retrieval side; ``skip_retriever_step`` keeps the
    retriever fixed (the unsupervised-retriever case)."""
    params = _all_params(model, access)
    theta, omega = model.parameters(access)
    theta_keys = _keys(params, theta, cfg.freeze)
    omega_keys = _keys(params, omega, cfg.freeze)
    if not cfg.skip_retriever_step and not omega_keys:
        raise RemlError("conditional training needs a trainable retriever projection")
    rng = np.random.default_rng(cfg.seed)
    stepper = _Stepper(params, cfg.learning_rate, cfg.momentum)
    tracker = _Tracker(model, access, val, params, cfg.patience)
    result, last = TrainResult(), None
    rounds = cfg.conditional_rounds
    for r in range(rounds):
        last = _epoch(model, access, data, stepper, theta_keys, cfg, rng, False, 1.0, last, f"round {r} (prediction)")
        if not cfg.skip_retriever_step:
            tau = cfg.tau(r, rounds)
            last = _epoch(model, access, data, stepper, omega_keys, cfg, rng, True, tau, last, f"round {r} (retrieval)")
        _record(result, metrics, r, last, tracker.observe(r))
        if tracker.should_stop:
            break
    return tracker.finish(result)


def train_joint(
    model: Any,
    access: Access,
    data: Dataset,
    cfg: TrainerConfig,
    val: Dataset | None = None,
    metrics: MetricsWriter | None = None,
) -> TrainResult:
    """Simultaneous steps on both parameter groups through soft retrieval."""
    params = _all_params(model, access)
    keys = {k for k in params if k not in cfg.freeze}
    rng = np.random.default_rng(cfg.seed)
    stepper = _Stepper(params, cfg.learning_rate, cfg.momentum)
    tracker = _Tracker(model, access, val, params, cfg.patience)
    result, last = TrainResult(), None
    for epoch in range(cfg.epochs):
        tau = cfg.tau(epoch, cfg.epochs)
        last = _epoch(model, access, data, stepper, keys, cfg, rng, True, tau, last, f"epoch {epoch}")
        _record(result, metrics, epoch, last, tracker.observe(epoch))
        if tracker.should_stop:
            break
    return tracker.finish(result)


TRAINERS: dict[str, Callable[..., TrainResult]] = {
    "independent": train_independent,
    "conditional": train_conditional,
    "joint": train_joint,
}


def train(model: Any, access: Access, data: Dataset, cfg: TrainerConfig, **kw: Any) -> TrainResult:
    return TRAINERS[cfg.regime](model, access, data, cfg, **kw)


# -- multi-model objective ----------------------------------------------------


@dataclass
class ModelEntry:
    model: Any
    data: Dataset
    alpha: float = 1.0
    access: Sequence[InformationAccessModel] = ()


@dataclass
class MultiModelConfig:
    entries: Sequence[ModelEntry]
    personalize: bool = False

    def __post_init__(self) -> None:
        if not self.entries:
            raise ValueError("no models")
        if any(e.alpha < 0 for e in self.entries):
            raise ValueError("loss weights must be non-negative")
        if not sum(e.alpha for e in self.entries) > 0:
            raise ValueError("loss weights must not all be zero")
        ids = [e.model.model_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate model ids {ids}")


@dataclass
class MultiTrainResult:
    train_losses: dict[str, list[float]]


def train_multi(cfg: MultiModelConfig, trainer_cfg: TrainerConfig) -> MultiTrainResult:
    """Round-robin joint training of several models over shared retrieval.

    Each step applies ``alpha_i`` times the batch gradient of model i;
    models with zero weight take no steps at all.
    """
    for e in cfg.entries:
        e.model.check_access(e.access)
        if cfg.personalize:
            for a in e.access:
                a.enable_personalization(e.model.model_id)
    active = [e for e in cfg.entries if e.alpha > 0]
    rngs = [np.random.default_rng(trainer_cfg.seed) for _ in active]
    steppers = []
    for e in active:
        params = _all_params(e.model, e.access)
        keys = {k for k in params if k not in trainer_cfg.freeze}
        steppers.append((_Stepper(params, trainer_cfg.learning_rate, trainer_cfg.momentum), keys))
    losses: dict[str, list[float]] = {e.model.model_id: [] for e in cfg.entries}
    last: float | None = None
    bs = trainer_cfg.batch_size
    for epoch in range(trainer_cfg.epochs):
        tau = trainer_cfg.tau(epoch, trainer_cfg.epochs)
        perms = [rng.permutation(len(e.data)) for rng, e in zip(rngs, active)]
        totals = [0.0] * len(active)
        n_steps = max(math.ceil(len(e.data) / bs) for e in active)
        for s in range(n_steps):
            for i, (e, perm) in enumerate(zip(active, perms)):
                idx = perm[s * bs : (s + 1) * bs]
                if len(idx) == 0:
                    continue
                sessions = e.data.session_ids
                loss, grads = e.model.batch_loss_and_gradients(
                    e.data.X[idx], e.data.Y[idx], [sessions[j] for j in idx], e.access, True, tau
                )
                last = _check_finite(loss, last, f"epoch {epoch}, model {e.model.model_id}")
                stepper, keys = steppers[i]
                stepper.step(grads, keys, e.alpha)
                totals[i] += loss * len(idx)
        for e, t in zip(active, totals):
            losses[e.model.model_id].append(t / len(e.data))
    return MultiTrainResult(losses)


def combined_loss(cfg: MultiModelConfig) -> float:
    """(1/M) sum_i alpha_i * mean hard-retrieval loss of model i."""
    total = sum(e.alpha * float(np.mean(per_example_losses(e.model, e.access, e.data))) for e in cfg.entries)
    return total / len(cfg.entries)
