"""Retrieval models: exact dense scoring, Okapi lexical scoring, soft
(softmax) retrieval for end-to-end training, and oracle/random baselines."""
from __future__ import annotations

import json
import math
import zlib
from collections import defaultdict
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .core import (
    Collection,
    DenseVector,
    DimensionMismatch,
    Document,
    FeatureMap,
    Hit,
    Query,
    RemlError,
    ResultList,
    TemplateId,
    TermSet,
    dumps,
)

SCORINGS = ("inner_product", "cosine")
SNAPSHOT_FORMAT = "reml-index"


class UnknownSession(RemlError, KeyError):
    def __str__(self) -> str:
        return f"unknown session_id {self.args[0]!r}"


def softmax(scores: np.ndarray, temperature: float = 1.0, axis: int = -1) -> np.ndarray:
    z = np.asarray(scores, dtype=np.float64) / temperature
    with np.errstate(over="ignore"):  # a spread beyond float range gives -inf, i.e. weight 0
        z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax_backward(weights: np.ndarray, grad_weights: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    """Gradient w.r.t. the scores fed to ``softmax(scores / temperature)``."""
    inner = np.sum(weights * grad_weights, axis=-1, keepdims=True)
    return weights * (grad_weights - inner) / temperature


def _hits(docs: Sequence[Document], scores: np.ndarray, order: np.ndarray) -> tuple[Hit, ...]:
    return tuple(Hit(docs[i], docs[i].features.with_entries(score=float(scores[i]))) for i in order)


def _rank(scores: np.ndarray) -> np.ndarray:
    # columns are in ascending id order, so a stable sort breaks ties by id
    return np.argsort(-scores, kind="stable")


@dataclass
class DenseRetriever:
    """Exhaustive scorer over a collection.

    ``projection`` (the bilinear matrix in ``q^T M d``) is the trainable
    part of the retriever; ``None`` means plain scoring.
    """

    collection: Collection
    scoring: str = "inner_product"
    projection: np.ndarray | None = None
    templates: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.scoring not in SCORINGS:
            raise ValueError(f"scoring must be one of {SCORINGS}, got {self.scoring!r}")
        d = self.collection.dimension
        if self.projection is not None:
            self.projection = np.array(self.projection, dtype=np.float64)
            if self.projection.shape != (d, d):
                raise ValueError(f"projection must be {d}x{d}, got {self.projection.shape}")
        if self.templates is not None:
            self.templates = np.array(self.templates, dtype=np.float64)
            if self.templates.ndim != 2 or self.templates.shape[1] != d:
                raise DimensionMismatch(d, self.templates.shape[-1], "templates")

    @property
    def dimension(self) -> int:
        return self.collection.dimension

    def _check(self, q: np.ndarray) -> np.ndarray:
        q = np.asarray(q, dtype=np.float64)
        if q.shape[-1] != self.dimension:
            raise DimensionMismatch(self.dimension, q.shape[-1], "query")
        return q

    def score(self, q: np.ndarray, d: Document) -> float:
        q = self._check(q)
        if d.vector is None:
            raise RemlError(f"document {d.id} has no vector")
        if len(d.vector) != self.dimension:
            raise DimensionMismatch(self.dimension, len(d.vector), f"document {d.id}")
        return float(self.score_matrix(q[None, :], d.vector[None, :])[0, 0])

    def score_matrix(self, Q: np.ndarray, V: np.ndarray) -> np.ndarray:
        """Scores for a batch of queries (B, d) against vectors (N, d)."""
        U = V if self.projection is None else V @ self.projection.T
        S = Q @ U.T
        if self.scoring == "cosine":
            S = S * self._inverse_norms(Q, V)
        return S

    @staticmethod
    def _inverse_norms(Q: np.ndarray, V: np.ndarray) -> np.ndarray:
        denom = np.outer(np.linalg.norm(Q, axis=1), np.linalg.norm(V, axis=1))
        out = np.zeros_like(denom)
        np.divide(1.0, denom, out=out, where=denom > 0)
        return out

    def score_backward(
        self, Q: np.ndarray, V: np.ndarray, S: np.ndarray, G: np.ndarray
    ) -> tuple[np.ndarray, np.ndarray | None]:
        """Backpropagate dL/dS to (dL/dQ, dL/dM)."""
        U = V if self.projection is None else V @ self.projection.T
        if self.scoring == "cosine":
            G_raw = G * self._inverse_norms(Q, V)
            qn2 = np.sum(Q * Q, axis=1)
            coef = np.zeros_like(qn2)
            np.divide(np.sum(G * S, axis=1), qn2, out=coef, where=qn2 > 0)
            G_Q = G_raw @ U - coef[:, None] * Q
        else:
            G_raw = G
            G_Q = G_raw @ U
        G_M = None if self.projection is None else Q.T @ G_raw @ V
        return G_Q, G_M

    def query_vector(self, query: Query) -> np.ndarray:
        payload = query.payload
        if isinstance(payload, DenseVector):
            return self._check(payload.vector)
        if isinstance(payload, TemplateId):
            if self.templates is None:
                raise RemlError("template query sent to a retriever without templates")
            if not 0 <= payload.index < len(self.templates):
                raise RemlError(f"template id {payload.index} out of range")
            return self.templates[payload.index]
        raise RemlError(f"dense retriever cannot serve {type(payload).__name__} payloads")

    def retrieve_topk(self, query: Query) -> ResultList:
        q = self.query_vector(query)
        ids, V, docs = self.collection.view(query.model_id)
        if not docs:
            return ResultList(query.query_id)
        s = self.score_matrix(q[None, :], V)[0]
        order = _rank(s)[: query.k]
        return ResultList(query.query_id, _hits(docs, s, order))

    def soft_retrieve(
        self, q: np.ndarray, temperature: float, model_id: str | None = None, query_id: str = ""
    ) -> ResultList:
        if not temperature > 0:
            raise ValueError(f"temperature must be positive, got {temperature}")
        q = self._check(q)
        ids, V, docs = self.collection.view(model_id)
        if not docs:
            raise RemlError("soft retrieval over an empty collection")
        s = self.score_matrix(q[None, :], V)[0]
        w = softmax(s, temperature)
        order = _rank(s)
        return ResultList(query_id, _hits(docs, s, order), w[order])

    def document_scores(self, query: Query, docs: Sequence[Document]) -> np.ndarray:
        q = self.query_vector(query)
        if not docs:
            return np.zeros(0)
        return self.score_matrix(q[None, :], np.array([d.vector for d in docs]))[0]


def score(retriever: DenseRetriever, q: np.ndarray, d: Document) -> float:
    return retriever.score(q, d)


def retrieve_topk(retriever: Any, query: Query) -> ResultList:
    return retriever.retrieve_topk(query)


def soft_retrieve(retriever: DenseRetriever, q: np.ndarray, temperature: float, **kw: Any) -> ResultList:
    return retriever.soft_retrieve(q, temperature, **kw)


class LexicalRetriever:
    """Okapi BM25 over token documents, with a plain dict-of-postings index."""

    def __init__(self, collection: Collection, k1: float = 1.2, b: float = 0.75):
        self.collection = collection
        self.k1 = float(k1)
        self.b = float(b)
        self.refresh()

    def refresh(self) -> None:
        postings: dict[int, list[tuple[int, int]]] = defaultdict(list)
        self.doc_lengths: dict[int, int] = {}
        for doc in self.collection:  # ascending id, so postings come out sorted
            if doc.tokens is None:
                continue
            self.doc_lengths[doc.id] = len(doc.tokens)
            counts: dict[int, int] = defaultdict(int)
            for tok in doc.tokens:
                counts[tok] += 1
            for tok, tf in counts.items():
                postings[tok].append((doc.id, tf))
        self.inverted_index = dict(postings)
        n = len(self.doc_lengths)
        self.avgdl = sum(self.doc_lengths.values()) / n if n else 0.0

    def idf(self, token: int) -> float:
        N = len(self.doc_lengths)
        n = len(self.inverted_index.get(token, ()))
        return math.log((N - n + 0.5) / (n + 0.5) + 1.0)

    def _term_score(self, token: int, tf: int, dl: int) -> float:
        if tf == 0:
            return 0.0
        norm = 1.0 - self.b + self.b * (dl / self.avgdl if self.avgdl else 0.0)
        return self.idf(token) * tf * (self.k1 + 1.0) / (tf + self.k1 * norm)

    def lexical_score(self, terms: TermSet, d: Document) -> float:
        if d.tokens is None:
            return 0.0
        dl = len(d.tokens)
        total = 0.0
        for tok, weight in terms.terms:
            tf = d.tokens.count(tok)
            if tf and tok in self.inverted_index:
                total += weight * self._term_score(tok, tf, dl)
        return total

    def retrieve_topk(self, query: Query) -> ResultList:
        if not isinstance(query.payload, TermSet):
            raise RemlError(f"lexical retriever cannot serve {type(query.payload).__name__} payloads")
        acc: dict[int, float] = defaultdict(float)
        for tok, weight in query.payload.terms:
            for doc_id, tf in self.inverted_index.get(tok, ()):
                acc[doc_id] += weight * self._term_score(tok, tf, self.doc_lengths[doc_id])
        hits = []
        for doc_id, s in acc.items():
            doc = self.collection.get(doc_id)
            if self.collection.visible(doc, query.model_id):
                hits.append(Hit(doc, doc.features.with_entries(score=s)))
        hits.sort(key=lambda h: (-h.score, h.document.id))
        return ResultList(query.query_id, tuple(hits[: query.k]))

    def document_scores(self, query: Query, docs: Sequence[Document]) -> np.ndarray:
        return np.array([self.lexical_score(query.payload, d) for d in docs])


def lexical_score(retriever: LexicalRetriever, terms: TermSet, d: Document) -> float:
    return retriever.lexical_score(terms, d)


@dataclass
class OracleRetriever:
    """Ground-truth rankings per session, optionally perturbed.

    Noise is one top-to-bottom pass over adjacent pairs, each swapped with
    probability ``noise_probability``. ``adversarial`` serves the ground
    truth reversed (least relevant first).
    """

    collection: Collection
    relevance_map: Mapping[str, Sequence[int]]
    noise_probability: float = 0.0
    rng_seed: int = 0
    adversarial: bool = False
    _rng: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if not 0.0 <= self.noise_probability <= 1.0:
            raise ValueError(f"noise probability must be in [0, 1], got {self.noise_probability}")
        self.reset()

    def reset(self) -> None:
        self._rng = np.random.default_rng(self.rng_seed)

    def ranking(self, session_id: str) -> Sequence[int]:
        try:
            ranked = self.relevance_map[session_id]
        except KeyError:
            raise UnknownSession(session_id) from None
        return ranked[::-1] if self.adversarial else ranked

    def retrieve_topk(self, query: Query) -> ResultList:
        ranked: list[int] = []
        for i in self.ranking(query.session_id):
            if len(ranked) == query.k:
                break
            if self.collection.visible(self.collection.get(int(i)), query.model_id):
                ranked.append(int(i))
        p = self.noise_probability
        for i in range(len(ranked) - 1):
            if self._rng.random() < p:
                ranked[i], ranked[i + 1] = ranked[i + 1], ranked[i]
        hits = []
        for pos, doc_id in enumerate(ranked):
            doc = self.collection.get(doc_id)
            hits.append(Hit(doc, doc.features.with_entries(score=float(query.k - pos))))
        return ResultList(query.query_id, tuple(hits))

    def document_scores(self, query: Query, docs: Sequence[Document]) -> np.ndarray:
        ranked = self.ranking(query.session_id)
        pos = {int(doc_id): i for i, doc_id in enumerate(ranked)}
        return np.array([float(query.k - pos.get(d.id, len(ranked))) for d in docs])


def oracle_retrieve(oracle: OracleRetriever, query: Query) -> ResultList:
    return oracle.retrieve_topk(query)


@dataclass
class RandomRetriever:
    """Uniformly random rankings, reproducible per (seed, session)."""

    collection: Collection
    rng_seed: int = 0

    def _scores(self, session_id: str, ids: np.ndarray) -> np.ndarray:
        rng = np.random.default_rng([self.rng_seed, zlib.crc32(session_id.encode())])
        table = rng.random(len(self.collection))
        lookup = {doc_id: i for i, doc_id in enumerate(self.collection.ids())}
        return np.array([table[lookup[i]] for i in ids])

    def retrieve_topk(self, query: Query) -> ResultList:
        docs = [d for d in self.collection if self.collection.visible(d, query.model_id)]
        if not docs:
            return ResultList(query.query_id)
        s = self._scores(query.session_id, np.array([d.id for d in docs]))
        return ResultList(query.query_id, _hits(docs, s, _rank(s)[: query.k]))

    def document_scores(self, query: Query, docs: Sequence[Document]) -> np.ndarray:
        return self._scores(query.session_id, np.array([d.id for d in docs]))


def write_snapshot(path: str | Path, collection: Collection, kind: str = "dense") -> None:
    header = {
        "format": SNAPSHOT_FORMAT,
        "version": 1,
        "kind": kind,
        "dimension": collection.dimension,
        "count": len(collection),
    }
    lines = [dumps(header)] + [dumps(d.to_dict()) for d in collection]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_snapshot(path: str | Path, capacity: int | None = None) -> Collection:
    with open(path, encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        if header.get("format") != SNAPSHOT_FORMAT:
            raise RemlError(f"{path}: not an index snapshot")
        coll = Collection(header["dimension"], capacity=capacity)
        for line in fh:
            if line.strip():
                coll.add(Document.from_dict(json.loads(line)))
    if len(coll) != header["count"]:
        raise RemlError(f"{path}: header says {header['count']} documents, found {len(coll)}")
    return coll
