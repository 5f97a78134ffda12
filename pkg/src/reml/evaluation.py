"""Extrinsic evaluation (downstream effect of retrieval) and intrinsic
evaluation (retriever scores against machine-derived utility labels)."""
from __future__ import annotations

import json
import math
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
from scipy.stats import kendalltau

from .access import InformationAccessModel
from .core import Dataset, FeatureMap, Hit, Query, ResultList
from .feedback import UtilityFunction, per_document_utility, utility_gain
from .optim import per_example_losses
from .tasks import SyntheticTask, SyntheticTaskSpec, make_task  # noqa: F401  (re-exported)

Access = Sequence[InformationAccessModel]


@dataclass
class ExtrinsicReport:
    n: int
    loss_with_retrieval: float
    loss_without_retrieval: float
    delta: float
    utility_gain_mean: float
    ablations: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def _require_data(data: Dataset | Sequence[Any]) -> None:
    if data is None or len(data) == 0:
        raise ValueError("empty dataset")


def extrinsic_eval(model: Any, access: Access, data: Dataset, U: UtilityFunction | None = None) -> ExtrinsicReport:
    """Loss with and without retrieval for the same parameters.

    ``delta`` is loss_with - loss_without, so negative means retrieval helps.
    """
    _require_data(data)
    U = U or UtilityFunction.for_task(data.task_kind)
    X, Y, sessions = data.X, data.Y, data.session_ids
    with_r = model.predict_batch(X, sessions, access)
    without = model.predict_batch(X, sessions, access, disabled=True)
    gains = [U(with_r[i], Y[i]) - U(without[i], Y[i]) for i in range(len(data))]
    loss_with = float(np.mean(per_example_losses(model, access, data)))
    loss_without = float(np.mean(per_example_losses(model, access, data, disabled=True)))
    ablations = {}
    if len(access) > 1:
        for j in range(len(access)):
            pred = model.predict_batch(X, sessions, access, disabled=[j])
            ablations[f"without_access_{j}"] = float(np.mean([-U(pred[i], Y[i]) for i in range(len(data))]))
    return ExtrinsicReport(len(data), loss_with, loss_without, loss_with - loss_without, float(np.mean(gains)), ablations)


def kendall_tau(scores: Sequence[float], labels: Sequence[float]) -> float:
    """Tau-b; NaN when either side is constant."""
    if len(scores) < 2:
        return math.nan
    return float(kendalltau(scores, labels).statistic)


@dataclass
class QueryLabels:
    query_id: str
    document_ids: list[int]
    scores: list[float]
    utilities: list[float]
    retrieved: int
    tau: float
    list_utility_gain: float


@dataclass
class IntrinsicReport:
    queries: list[QueryLabels]
    tau: float
    utility_at_k: float
    tau_delta_correlation: float

    def __post_init__(self) -> None:
        if not math.isnan(self.tau) and not -1.0 <= self.tau <= 1.0:
            raise ValueError(f"tau out of range: {self.tau}")

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        return _nan_to_none(d)


def _nan_to_none(v: Any) -> Any:
    if isinstance(v, float) and math.isnan(v):
        return None
    if isinstance(v, dict):
        return {k: _nan_to_none(x) for k, x in v.items()}
    if isinstance(v, list):
        return [_nan_to_none(x) for x in v]
    return v


def intrinsic_eval(
    model: Any,
    access: Access,
    data: Dataset,
    U: UtilityFunction | None = None,
    k: int = 5,
    seed: int = 0,
    retriever: Any | None = None,
) -> IntrinsicReport:
    """Label top-k retrieved documents plus k random other documents by
    their singleton utility gain, then compare with the retriever's scores.

    ``retriever`` defaults to the one inside ``access[0]``; passing another
    scores the same labelled pool with a different ranking function.
    """
    _require_data(data)
    U = U or UtilityFunction.for_task(data.task_kind)
    a = access[0]
    retriever = retriever or a.retriever
    rng = np.random.default_rng(seed)
    per_query: list[QueryLabels] = []
    for ex, sid in zip(data, data.session_ids):
        for q in a.queries(ex.x, sid, model.model_id):
            q = Query(q.query_id, q.session_id, q.model_id, q.payload, k, q.meta)
            top = retriever.retrieve_topk(q)
            taken = {h.document.id for h in top.items}
            pool = [d for d in a.collection if d.id not in taken and a.collection.visible(d, q.model_id)]
            picks = rng.choice(len(pool), size=min(k, len(pool)), replace=False) if pool else []
            negatives = [pool[int(i)] for i in sorted(picks)]
            neg_scores = retriever.document_scores(q, negatives) if negatives else np.zeros(0)
            hits = list(top.items) + [
                Hit(d, d.features.with_entries(score=float(s))) for d, s in zip(negatives, neg_scores)
            ]
            labelled = ResultList(q.query_id, tuple(hits))
            util = per_document_utility(model, ex.x, ex.y, q, labelled, U, access)
            scores = [h.features.score for h in hits]
            gain = utility_gain(model, ex.x, ex.y, q, top, U, access) if top.items else 0.0
            per_query.append(
                QueryLabels(
                    q.query_id,
                    [h.document.id for h in hits],
                    scores,
                    [float(u) for u in util],
                    len(top.items),
                    kendall_tau(scores, util),
                    float(gain),
                )
            )
    taus = np.array([p.tau for p in per_query], dtype=np.float64)
    gains = np.array([p.list_utility_gain for p in per_query], dtype=np.float64)
    ok = ~np.isnan(taus)
    tau = float(np.mean(taus[ok])) if ok.any() else math.nan
    corr = kendall_tau(taus[ok], gains[ok]) if ok.sum() > 1 else math.nan
    return IntrinsicReport(per_query, tau, float(np.mean(gains)) if len(gains) else math.nan, corr)


def write_report(path: str | Path, report: Any) -> None:
    d = report.to_dict() if hasattr(report, "to_dict") else report
    Path(path).write_text(json.dumps(_nan_to_none(d), indent=2, allow_nan=False) + "\n", encoding="utf-8")


def render_table(rows: dict[str, Any], title: str | None = None) -> str:
    """Two-column plain text table of scalar entries."""
    items = [(k, v) for k, v in rows.items() if not isinstance(v, (list, dict))]
    width = max((len(k) for k, _ in items), default=0)
    lines = [title] if title else []
    for key, v in items:
        if isinstance(v, float):
            v = "nan" if math.isnan(v) else f"{v:.6g}"
        lines.append(f"{key.ljust(width)}  {v}")
    return "\n".join(lines)


__all__ = [
    "ExtrinsicReport",
    "IntrinsicReport",
    "QueryLabels",
    "SyntheticTask",
    "SyntheticTaskSpec",
    "extrinsic_eval",
    "intrinsic_eval",
    "kendall_tau",
    "make_task",
    "render_table",
    "write_report",
]
