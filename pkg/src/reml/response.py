"""Response processing: turn a result list into a fixed-size vector."""
from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from .core import Document, RemlError, ResultList

PROCESSOR_KINDS = ("weighted_mean", "concat_topk", "score_distribution")


@dataclass(frozen=True)
class ResponseProcessor:
    """Vector-valued response processing.

    ``append_label`` extends each document's content vector with its
    ``payload_label`` so that labels riding on documents reach the model.
    """

    kind: str = "weighted_mean"
    m: int = 1
    append_label: bool = False

    def __post_init__(self) -> None:
        if self.kind not in PROCESSOR_KINDS:
            raise ValueError(f"processor kind must be one of {PROCESSOR_KINDS}, got {self.kind!r}")
        if self.m < 1:
            raise ValueError("m must be at least 1")

    @property
    def differentiable(self) -> bool:
        return self.kind == "weighted_mean"

    def content_dim(self, dimension: int) -> int:
        return dimension + int(self.append_label)

    def output_dim(self, dimension: int) -> int:
        if self.kind == "weighted_mean":
            return self.content_dim(dimension)
        if self.kind == "concat_topk":
            return self.m * self.content_dim(dimension)
        return self.m

    def contents(self, docs: Sequence[Document], dimension: int) -> np.ndarray:
        out = np.zeros((len(docs), self.content_dim(dimension)))
        if self.kind == "score_distribution":
            return out
        for i, doc in enumerate(docs):
            if doc.vector is None:
                raise RemlError(f"{self.kind} needs document vectors; document {doc.id} has none")
            out[i, :dimension] = doc.vector
            if self.append_label:
                if doc.payload_label is None:
                    raise RemlError(f"document {doc.id} carries no payload_label")
                out[i, dimension] = float(doc.payload_label)
        return out

    def from_arrays(
        self,
        scores: np.ndarray,
        contents: np.ndarray,
        valid: np.ndarray,
        weights: np.ndarray | None = None,
    ) -> np.ndarray:
        """Batched processing of left-aligned ranked lists.

        scores/valid: (B, n); contents: (B, n, c); weights optionally (B, n).
        Rows with no valid entries map to the zero vector.
        """
        B, n = scores.shape
        c = contents.shape[2]
        if self.kind == "weighted_mean":
            if weights is None:
                weights = _masked_softmax(scores, valid)
            return np.einsum("bn,bnc->bc", weights * valid, contents)
        if self.kind == "concat_topk":
            take = min(n, self.m)
            out = np.zeros((B, self.m, c))
            out[:, :take] = contents[:, :take] * valid[:, :take, None]
            return out.reshape(B, self.m * c)
        take = min(n, self.m)
        dist = _masked_softmax(scores[:, :take], valid[:, :take])
        out = np.zeros((B, self.m))
        out[:, :take] = dist
        return out

    def process(self, result: ResultList, dimension: int) -> np.ndarray:
        if not result.items:
            return np.zeros(self.output_dim(dimension))
        contents = self.contents(result.documents, dimension)
        n = len(result.items)
        weights = None if result.soft_weights is None else result.soft_weights[None, :]
        out = self.from_arrays(result.scores[None, :], contents[None], np.ones((1, n), dtype=bool), weights)
        return out[0]


def _masked_softmax(scores: np.ndarray, valid: np.ndarray) -> np.ndarray:
    z = np.where(valid, scores, -np.inf)
    top = np.max(z, axis=1, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    e = np.where(valid, np.exp(z - top), 0.0)
    total = np.sum(e, axis=1, keepdims=True)
    return np.divide(e, total, out=np.zeros_like(e), where=total > 0)


def process(processor: ResponseProcessor, result: ResultList, dimension: int) -> np.ndarray:
    return processor.process(result, dimension)
