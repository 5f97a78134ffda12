"""Query generation: turn a model input into zero or more queries."""
from __future__ import annotations

from collections.abc import Callable
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .core import DenseVector, DimensionMismatch, Query, TemplateId, TermSet

STRATEGY_KINDS = ("identity", "linear", "template")


def always(x: Any) -> bool:
    return True


@dataclass
class QueryStrategy:
    """How queries are formed from an input.

    ``identity`` sends x itself (a TermSet when x is a token tuple),
    ``linear`` sends ``W_q @ x`` for each of ``n_queries`` stacked
    projections, and ``template`` picks the argmax of ``selector @ x`` from
    a fixed template list. ``gate`` may decline to query at all.
    """

    kind: str = "identity"
    projection: np.ndarray | None = None
    selector: np.ndarray | None = None
    n_queries: int = 1
    k_default: int = 10
    gate: Callable[[Any], bool] = field(default=always, repr=False)

    def __post_init__(self) -> None:
        if self.kind not in STRATEGY_KINDS:
            raise ValueError(f"strategy kind must be one of {STRATEGY_KINDS}, got {self.kind!r}")
        if self.n_queries < 1:
            raise ValueError("n_queries must be at least 1")
        if self.kind == "linear":
            if self.projection is None:
                raise ValueError("linear strategy needs a projection")
            W = np.array(self.projection, dtype=np.float64)
            if W.ndim == 2:
                W = np.repeat(W[None], self.n_queries, axis=0)
            if W.ndim != 3 or W.shape[0] != self.n_queries:
                raise ValueError(f"projection shape {W.shape} does not match n_queries={self.n_queries}")
            self.projection = W
        if self.kind == "template":
            if self.selector is None:
                raise ValueError("template strategy needs a selector matrix")
            self.selector = np.array(self.selector, dtype=np.float64)

    def output_dim(self, input_dim: int) -> int:
        if self.kind == "linear":
            return self.projection.shape[1]
        return input_dim

    def check(self, input_dim: int, target_dim: int | None) -> None:
        if self.kind == "linear" and self.projection.shape[2] != input_dim:
            raise DimensionMismatch(self.projection.shape[2], input_dim, "query projection input")
        if self.kind == "template" and self.selector.shape[1] != input_dim:
            raise DimensionMismatch(self.selector.shape[1], input_dim, "template selector input")
        if target_dim is not None and self.kind != "template" and self.output_dim(input_dim) != target_dim:
            raise DimensionMismatch(target_dim, self.output_dim(input_dim), "query vector")

    def vectors(self, x: np.ndarray) -> list[np.ndarray]:
        """Dense query vectors for x, before any personalization offset."""
        x = np.asarray(x, dtype=np.float64)
        if self.kind == "identity":
            return [x] * self.n_queries
        if self.kind == "linear":
            if x.shape[-1] != self.projection.shape[2]:
                raise DimensionMismatch(self.projection.shape[2], x.shape[-1], "query projection input")
            return [W @ x for W in self.projection]
        raise ValueError("template strategy has no query vectors")

    def generate_queries(
        self,
        x: Any,
        session_id: str,
        model_id: str,
        k: int | None = None,
        offset: np.ndarray | None = None,
    ) -> list[Query]:
        if not self.gate(x):
            return []
        k = k or self.k_default
        ids = [f"{session_id}:{i}" for i in range(self.n_queries)]
        if isinstance(x, tuple):
            if self.kind != "identity":
                raise ValueError(f"{self.kind} strategy needs a dense input")
            return [Query(qid, session_id, model_id, TermSet.from_tokens(x), k) for qid in ids]
        if self.kind == "template":
            x = np.asarray(x, dtype=np.float64)
            if x.shape[-1] != self.selector.shape[1]:
                raise DimensionMismatch(self.selector.shape[1], x.shape[-1], "template selector input")
            choice = int(np.argmax(self.selector @ x))  # argmax returns the lowest index on ties
            return [Query(qid, session_id, model_id, TemplateId(choice), k) for qid in ids]
        vecs = self.vectors(x)
        if offset is not None:
            vecs = [v + offset for v in vecs]
        return [Query(qid, session_id, model_id, DenseVector(v), k) for qid, v in zip(ids, vecs)]


def generate_queries(strategy: QueryStrategy, x: Any, session_id: str, model_id: str, **kw: Any) -> list[Query]:
    return strategy.generate_queries(x, session_id, model_id, **kw)
