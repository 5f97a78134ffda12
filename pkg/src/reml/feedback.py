"""Feedback handling: utility gain of a result list, per-document
attribution through singleton lists, and gradient feedback."""
from __future__ import annotations

import json
import math
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

from .core import Feedback, Query, ResultList, dumps

UTILITY_KINDS = ("neg_squared_error", "neg_log_loss", "accuracy01")


@dataclass(frozen=True)
class UtilityFunction:
    """A utility over (prediction, target); higher is always better.

    Scalar predictions are regression outputs; array predictions are class
    distributions.
    """

    kind: str = "neg_squared_error"

    def __post_init__(self) -> None:
        if self.kind not in UTILITY_KINDS:
            raise ValueError(f"utility kind must be one of {UTILITY_KINDS}, got {self.kind!r}")

    def __call__(self, prediction: Any, y: Any) -> float:
        if self.kind == "neg_squared_error":
            if np.ndim(prediction) == 0:
                return -float((float(prediction) - float(y)) ** 2)
            target = np.zeros(len(prediction))
            target[int(y)] = 1.0
            return -float(np.sum((np.asarray(prediction) - target) ** 2))
        if np.ndim(prediction) == 0:
            raise ValueError(f"{self.kind} needs a class distribution, got a scalar prediction")
        p = float(prediction[int(y)])
        if self.kind == "neg_log_loss":
            return math.log(p) if p > 0 else -math.inf
        return 1.0 if int(np.argmax(prediction)) == int(y) else 0.0

    @classmethod
    def for_task(cls, task_kind: str) -> UtilityFunction:
        return cls("neg_squared_error" if task_kind == "regression" else "neg_log_loss")


def _responses(access: Sequence[Any], slot: int, lists: Sequence[ResultList]) -> list[list[ResultList]]:
    out: list[list[ResultList]] = [[] for _ in access]
    out[slot] = list(lists)
    return out


def utility_gain(
    model: Any,
    x: Any,
    y: Any,
    query: Query | None,
    result: ResultList,
    U: UtilityFunction,
    access: Sequence[Any],
    slot: int = 0,
) -> float:
    """U(f(x; L_q), y) - U(f(x; empty), y) with all other accesses empty."""
    with_list = model.predict_from_lists(x, _responses(access, slot, [result]), access)
    without = model.predict_from_lists(x, _responses(access, slot, []), access)
    return U(with_list, y) - U(without, y)


def per_document_utility(
    model: Any,
    x: Any,
    y: Any,
    query: Query | None,
    result: ResultList,
    U: UtilityFunction,
    access: Sequence[Any],
    slot: int = 0,
) -> np.ndarray:
    gains = [
        utility_gain(model, x, y, query, ResultList(result.query_id, (hit,)), U, access, slot)
        for hit in result.items
    ]
    return np.array(gains, dtype=np.float64)


def gradient_feedback(
    model: Any,
    x: Any,
    y: Any,
    query: Query,
    result: ResultList,
    access: Sequence[Any],
    slot: int = 0,
) -> Feedback:
    """dL/dr for the processed response r of ``result``."""
    grads = model.response_gradient(x, y, _responses(access, slot, [result]), access)
    return Feedback(query.query_id, model.model_id, "gradient", grads[slot])


def utility_feedback(
    model: Any, x: Any, y: Any, query: Query, result: ResultList, U: UtilityFunction, access: Sequence[Any]
) -> list[Feedback]:
    """Scalar and per-document utility feedback for one labeled query."""
    scalar = utility_gain(model, x, y, query, result, U, access)
    per_doc = per_document_utility(model, x, y, query, result, U, access)
    ids = tuple(h.document.id for h in result.items)
    return [
        Feedback(query.query_id, model.model_id, "scalar_utility_gain", scalar),
        Feedback(query.query_id, model.model_id, "per_document_utility", per_doc, ids),
    ]


def write_feedback_log(path: str | Path, feedbacks: Iterable[Feedback], append: bool = True) -> None:
    with open(path, "a" if append else "w", encoding="utf-8") as fh:
        for fb in feedbacks:
            fh.write(dumps(fb.to_dict()) + "\n")


def read_feedback_log(path: str | Path) -> list[Feedback]:
    with open(path, encoding="utf-8") as fh:
        return [Feedback.from_dict(json.loads(line)) for line in fh if line.strip()]
