"""An information access model: query generation, retrieval, response
processing, feedback handling and storage bound to one collection."""
from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .core import Collection, Document, Feedback, NotDifferentiable, Query, RemlError, ResultList
from .querygen import QueryStrategy, always
from .response import ResponseProcessor
from .retrieval import DenseRetriever, softmax, softmax_backward
from .storage import StorageHandler


@dataclass
class ScoreState:
    """Forward state of a batched dense scoring pass, kept for backprop."""

    X: np.ndarray
    gate: np.ndarray
    queries: list[np.ndarray]
    scores: list[np.ndarray]
    vectors: np.ndarray
    docs: list[Document]
    model_id: str | None
    weights: list[np.ndarray] = field(default_factory=list)
    temperature: float = 1.0
    contents: np.ndarray | None = None


@dataclass
class InformationAccessModel:
    retriever: Any
    strategy: QueryStrategy = field(default_factory=QueryStrategy)
    processor: ResponseProcessor = field(default_factory=ResponseProcessor)
    k: int = 10
    storage: StorageHandler | None = None
    personalization: dict[str, np.ndarray] = field(default_factory=dict)
    personalization_rate: float = 0.01
    feedback_log: list[Feedback] = field(default_factory=list)
    _contents: tuple[Any, np.ndarray] | None = field(default=None, init=False, repr=False)

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ValueError("k must be at least 1")
        if self.storage is not None and self.storage.collection is not self.collection:
            raise ValueError("storage handler and retriever must share one collection")

    @property
    def collection(self) -> Collection:
        return self.retriever.collection

    @property
    def dimension(self) -> int:
        return self.collection.dimension

    @property
    def output_dim(self) -> int:
        return self.processor.output_dim(self.dimension)

    @property
    def dense(self) -> bool:
        return isinstance(self.retriever, DenseRetriever) and self.strategy.kind != "template"

    def check_input(self, input_dim: int) -> None:
        target = self.dimension if isinstance(self.retriever, DenseRetriever) else None
        self.strategy.check(input_dim, target)

    # -- parameters ---------------------------------------------------

    def parameters(self, model_id: str | None = None) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
        """(prediction-side, retrieval-side) trainable arrays, unprefixed."""
        theta: dict[str, np.ndarray] = {}
        omega: dict[str, np.ndarray] = {}
        if self.strategy.kind == "linear":
            theta["W_q"] = self.strategy.projection
        if isinstance(self.retriever, DenseRetriever) and self.retriever.projection is not None:
            omega["M"] = self.retriever.projection
        if model_id is not None and model_id in self.personalization:
            omega[f"P.{model_id}"] = self.personalization[model_id]
        return theta, omega

    def enable_personalization(self, model_id: str) -> np.ndarray:
        if model_id not in self.personalization:
            self.personalization[model_id] = np.zeros(self.dimension)
        return self.personalization[model_id]

    # -- per-example path ---------------------------------------------

    def queries(self, x: Any, session_id: str, model_id: str) -> list[Query]:
        return self.strategy.generate_queries(
            x, session_id, model_id, k=self.k, offset=self.personalization.get(model_id)
        )

    def retrieve(self, query: Query) -> ResultList:
        result = self.retriever.retrieve_topk(query)
        if self.storage is not None:
            self.storage.record_query([h.document.id for h in result.items])
        return result

    def respond(self, x: Any, session_id: str, model_id: str) -> list[ResultList]:
        return [self.retrieve(q) for q in self.queries(x, session_id, model_id)]

    def represent(self, lists: Sequence[ResultList]) -> np.ndarray:
        """Processed response for one input; no lists means the empty response."""
        if not lists:
            return np.zeros(self.output_dim)
        out = self.processor.process(lists[0], self.dimension)
        for lst in lists[1:]:
            out = out + self.processor.process(lst, self.dimension)
        return out / len(lists) if len(lists) > 1 else out

    # -- batched path -------------------------------------------------

    def _gate(self, X: np.ndarray) -> np.ndarray:
        if self.strategy.gate is always:
            return np.ones(len(X), dtype=bool)
        return np.array([bool(self.strategy.gate(x)) for x in X])

    def _content_matrix(self, V: np.ndarray, docs: list[Document]) -> np.ndarray:
        if self._contents is None or self._contents[0] is not V:
            self._contents = (V, self.processor.contents(docs, self.dimension))
        return self._contents[1]

    def score_batch(self, X: np.ndarray, model_id: str | None) -> ScoreState:
        ids, V, docs = self.collection.view(model_id)
        gate = self._gate(X)
        queries, scores = [], []
        offset = self.personalization.get(model_id)
        for i in range(self.strategy.n_queries):
            Q = X if self.strategy.kind == "identity" else X @ self.strategy.projection[i].T
            if offset is not None:
                Q = Q + offset
            queries.append(Q)
            scores.append(self.retriever.score_matrix(Q, V))
        return ScoreState(X, gate, queries, scores, V, docs, model_id)

    def scores_backward(self, state: ScoreState, grad_scores: list[np.ndarray]) -> dict[str, np.ndarray]:
        grads: dict[str, np.ndarray] = {}
        G_Wq = []
        for Q, S, G_S in zip(state.queries, state.scores, grad_scores):
            G_S = G_S * state.gate[:, None]
            G_Q, G_M = self.retriever.score_backward(Q, state.vectors, S, G_S)
            if G_M is not None:
                grads["M"] = grads["M"] + G_M if "M" in grads else G_M
            if self.strategy.kind == "linear":
                G_Wq.append(G_Q.T @ state.X)
            if state.model_id in self.personalization:
                key = f"P.{state.model_id}"
                g = G_Q.sum(axis=0)
                grads[key] = grads[key] + g if key in grads else g
        if G_Wq:
            grads["W_q"] = np.stack(G_Wq)
        return grads

    def forward(
        self,
        X: np.ndarray,
        sessions: Sequence[str],
        model_id: str,
        soft: bool = False,
        temperature: float = 1.0,
    ) -> tuple[np.ndarray, ScoreState | None]:
        """Processed responses for a batch: (B, output_dim), plus soft state."""
        if soft:
            return self._forward_soft(X, model_id, temperature)
        if not self.dense or self.strategy.n_queries != 1:
            R = np.zeros((len(X), self.output_dim))
            for b, (x, sid) in enumerate(zip(X, sessions)):
                R[b] = self.represent(self.respond(x, sid, model_id))
            return R, None
        state = self.score_batch(X, model_id)
        R = np.zeros((len(X), self.output_dim))
        if not state.docs:
            return R, None
        S = state.scores[0]
        k = min(self.k, S.shape[1])
        order = np.argsort(-S, axis=1, kind="stable")[:, :k]
        top = np.take_along_axis(S, order, axis=1)
        C = self._content_matrix(state.vectors, state.docs)
        valid = np.repeat(state.gate[:, None], k, axis=1)
        R = self.processor.from_arrays(top, C[order], valid)
        if self.storage is not None:
            ids = np.array([d.id for d in state.docs])
            for b in range(len(X)):
                self.storage.record_query([int(i) for i in ids[order[b]]] if state.gate[b] else [])
        return R, None

    def _forward_soft(self, X: np.ndarray, model_id: str, temperature: float) -> tuple[np.ndarray, ScoreState]:
        if not self.dense:
            raise NotDifferentiable(f"{type(self.retriever).__name__} has no soft retrieval")
        if not self.processor.differentiable:
            raise NotDifferentiable(f"{self.processor.kind} processing is not differentiable")
        if not temperature > 0:
            raise ValueError(f"temperature must be positive, got {temperature}")
        state = self.score_batch(X, model_id)
        if not state.docs:
            raise RemlError("soft retrieval over an empty collection")
        C = self._content_matrix(state.vectors, state.docs)
        state.contents = C
        state.temperature = temperature
        n = len(state.scores)
        R = np.zeros((len(X), self.output_dim))
        for S in state.scores:
            W = softmax(S, temperature)
            state.weights.append(W)
            R = R + W @ C
        if n > 1:
            R = R / n
        return R * state.gate[:, None], state

    def backward(self, state: ScoreState | None, grad_R: np.ndarray) -> dict[str, np.ndarray]:
        if state is None:
            return {}
        n = len(state.scores)
        G = grad_R / n if n > 1 else grad_R
        G_W = G @ state.contents.T
        grad_scores = [softmax_backward(W, G_W, state.temperature) for W in state.weights]
        return self.scores_backward(state, grad_scores)

    # -- feedback and storage -----------------------------------------

    def receive_feedback(self, fb: Feedback) -> None:
        self.feedback_log.append(fb)
        if fb.kind == "per_document_utility" and self.storage is not None and fb.document_ids:
            for doc_id, u in zip(fb.document_ids, fb.value):
                self.storage.record_utility(doc_id, float(u))
        elif fb.kind == "gradient" and fb.model_id in self.personalization:
            offset = self.personalization[fb.model_id]
            if len(fb.value) == len(offset):
                offset -= self.personalization_rate * fb.value

    def store(self, model_id: str, doc: Document) -> int:
        if self.storage is None:
            raise RemlError("this information access model has no storage handler")
        return self.storage.store(model_id, doc)
