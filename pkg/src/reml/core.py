"""Shared value types for retrieval-enhanced models.

Everything here is an immutable value once constructed. Each type has a
canonical single-line JSON encoding (``encode``/``decode``) with
snake_case keys, id fields first, payload next and metadata last; the
service reuses these encodings verbatim on the wire.
"""
from __future__ import annotations

import json
import math
from collections.abc import Iterable, Iterator, Mapping, Sequence
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, NamedTuple, Union

import numpy as np

TASK_KINDS = ("regression", "classification", "next_token")
FEEDBACK_KINDS = ("scalar_utility_gain", "per_document_utility", "gradient")
SUM_TOL = 1e-9


class RemlError(Exception):
    """Base class for errors raised by this package."""


class DimensionMismatch(RemlError, ValueError):
    def __init__(self, expected: int, got: int, where: str = ""):
        self.expected = expected
        self.got = got
        prefix = f"{where}: " if where else ""
        super().__init__(f"{prefix}dimension mismatch (expected {expected}, got {got})")


class QuotaExceeded(RemlError):
    pass


class NotDifferentiable(RemlError):
    pass


def _frozen_vector(values: Any) -> np.ndarray:
    arr = np.array(values, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"expected a 1-d vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("vector contains non-finite values")
    arr.setflags(write=False)
    return arr


def _vec_list(v: np.ndarray | None) -> list[float] | None:
    return None if v is None else [float(a) for a in v]


def dumps(obj: Mapping[str, Any]) -> str:
    """Compact single-line JSON; floats use shortest round-trip repr."""
    return json.dumps(obj, separators=(",", ":"), allow_nan=False, ensure_ascii=False)


class FeatureMap(Mapping[str, float]):
    """Read-only map of named float features attached to a document."""

    __slots__ = ("_entries",)

    def __init__(self, entries: Mapping[str, float] | Iterable[tuple[str, float]] = ()):
        data = dict(entries)
        for key, value in data.items():
            if not isinstance(key, str):
                raise TypeError(f"feature names must be strings, got {key!r}")
            value = float(value)
            if not math.isfinite(value):
                raise ValueError(f"feature {key!r} is not finite")
            data[key] = value
        self._entries = data

    def __getitem__(self, key: str) -> float:
        return self._entries[key]

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def __eq__(self, other: object) -> bool:
        if isinstance(other, Mapping):
            return dict(self._entries) == dict(other)
        return NotImplemented

    def __hash__(self) -> int:
        return hash(tuple(sorted(self._entries.items())))

    def __repr__(self) -> str:
        return f"FeatureMap({self._entries!r})"

    def with_entries(self, **updates: float) -> FeatureMap:
        return FeatureMap({**self._entries, **updates})

    def to_dict(self) -> dict[str, float]:
        return dict(self._entries)

    @property
    def score(self) -> float:
        return self._entries["score"]


EMPTY_FEATURES = FeatureMap()


@dataclass(frozen=True, eq=False)
class Document:
    """A retrievable item: a dense vector, a token sequence, or both.

    ``namespace`` is ``None`` for globally visible documents, otherwise the
    model_id that owns it.
    """

    id: int
    vector: np.ndarray | None = None
    tokens: tuple[int, ...] | None = None
    payload_label: float | int | None = None
    features: FeatureMap = EMPTY_FEATURES
    namespace: str | None = None

    def __post_init__(self) -> None:
        if isinstance(self.id, bool) or not isinstance(self.id, (int, np.integer)):
            raise TypeError(f"document id must be an integer, got {self.id!r}")
        if not -(2**63) <= int(self.id) < 2**64:
            raise ValueError(f"document id {self.id} does not fit in 64 bits")
        object.__setattr__(self, "id", int(self.id))
        if self.vector is None and self.tokens is None:
            raise ValueError(f"document {self.id} has neither vector nor tokens")
        if self.vector is not None:
            object.__setattr__(self, "vector", _frozen_vector(self.vector))
        if self.tokens is not None:
            object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))
        if not isinstance(self.features, FeatureMap):
            object.__setattr__(self, "features", FeatureMap(self.features))
        label = self.payload_label
        if isinstance(label, np.generic):
            object.__setattr__(self, "payload_label", label.item())

    @property
    def dimension(self) -> int | None:
        return None if self.vector is None else len(self.vector)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Document):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    def __hash__(self) -> int:
        return hash(self.id)

    def __repr__(self) -> str:
        return f"Document(id={self.id}, dim={self.dimension}, label={self.payload_label!r}, ns={self.namespace!r})"

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "vector": _vec_list(self.vector),
            "tokens": None if self.tokens is None else list(self.tokens),
            "payload_label": self.payload_label,
            "features": self.features.to_dict(),
            "namespace": self.namespace,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> Document:
        _check_keys(d, {"id"}, {"id", "vector", "tokens", "payload_label", "features", "namespace"}, "document")
        return cls(
            id=d["id"],
            vector=d.get("vector"),
            tokens=d.get("tokens"),
            payload_label=d.get("payload_label"),
            features=FeatureMap(d.get("features") or {}),
            namespace=d.get("namespace"),
        )


@dataclass(frozen=True, eq=False)
class DenseVector:
    vector: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "vector", _frozen_vector(self.vector))

    def __eq__(self, other: object) -> bool:
        return isinstance(other, DenseVector) and np.array_equal(self.vector, other.vector)

    def to_dict(self) -> dict[str, Any]:
        return {"kind": "dense", "vector": _vec_list(self.vector)}


@dataclass(frozen=True)
class TermSet:
    """Weighted bag of token ids."""

    terms: tuple[tuple[int, float], ...]

    def __post_init__(self) -> None:
        raw = self.terms.items() if isinstance(self.terms, Mapping) else self.terms
        merged: dict[int, float] = {}
        for tok, w in raw:
            merged[int(tok)] = merged.get(int(tok), 0.0) + float(w)
        object.__setattr__(self, "terms", tuple(sorted(merged.items())))

    @classmethod
    def from_tokens(cls, tokens: Iterable[int]) -> TermSet:
        return cls(tuple((int(t), 1.0) for t in tokens))

    def to_dict(self) -> dict[str, Any]:
        return {"kind": "terms", "terms": [[t, w] for t, w in self.terms]}


@dataclass(frozen=True)
class TemplateId:
    index: int

    def to_dict(self) -> dict[str, Any]:
        return {"kind": "template", "index": self.index}


Payload = Union[DenseVector, TermSet, TemplateId]


def payload_from_dict(d: Mapping[str, Any]) -> Payload:
    kind = d.get("kind")
    if kind == "dense":
        return DenseVector(d["vector"])
    if kind == "terms":
        return TermSet(tuple((t, w) for t, w in d["terms"]))
    if kind == "template":
        return TemplateId(int(d["index"]))
    raise ValueError(f"unknown payload kind {kind!r}")


@dataclass(frozen=True)
class Query:
    query_id: str
    session_id: str
    model_id: str
    payload: Payload
    k: int = 10
    meta: FeatureMap | None = None

    def __post_init__(self) -> None:
        if isinstance(self.k, bool) or int(self.k) != self.k or self.k < 1:
            raise ValueError(f"k must be a positive integer, got {self.k!r}")
        object.__setattr__(self, "k", int(self.k))
        if self.meta is not None and not isinstance(self.meta, FeatureMap):
            object.__setattr__(self, "meta", FeatureMap(self.meta))

    def to_dict(self) -> dict[str, Any]:
        return {
            "query_id": self.query_id,
            "session_id": self.session_id,
            "model_id": self.model_id,
            "payload": self.payload.to_dict(),
            "k": self.k,
            "meta": None if self.meta is None else self.meta.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> Query:
        _check_keys(
            d,
            {"query_id", "session_id", "model_id", "payload"},
            {"query_id", "session_id", "model_id", "payload", "k", "meta"},
            "query",
        )
        return cls(
            query_id=str(d["query_id"]),
            session_id=str(d["session_id"]),
            model_id=str(d["model_id"]),
            payload=payload_from_dict(d["payload"]),
            k=d.get("k", 10),
            meta=None if d.get("meta") is None else FeatureMap(d["meta"]),
        )


class Hit(NamedTuple):
    document: Document
    features: FeatureMap

    @property
    def score(self) -> float:
        return self.features["score"]


def ranking_key(hit: Hit) -> tuple[float, int]:
    """Total order used for every result list: score desc, then id asc."""
    return (-hit.features["score"], hit.document.id)


@dataclass(frozen=True, eq=False)
class ResultList:
    query_id: str
    items: tuple[Hit, ...] = ()
    soft_weights: np.ndarray | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "items", tuple(Hit(*it) for it in self.items))
        if self.soft_weights is not None:
            w = np.array(self.soft_weights, dtype=np.float64)
            w.setflags(write=False)
            object.__setattr__(self, "soft_weights", w)

    def __len__(self) -> int:
        return len(self.items)

    def __iter__(self) -> Iterator[Hit]:
        return iter(self.items)

    @property
    def documents(self) -> list[Document]:
        return [h.document for h in self.items]

    @property
    def scores(self) -> np.ndarray:
        return np.array([h.features["score"] for h in self.items], dtype=np.float64)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ResultList):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    def to_dict(self) -> dict[str, Any]:
        return {
            "query_id": self.query_id,
            "items": [{"document": h.document.to_dict(), "features": h.features.to_dict()} for h in self.items],
            "soft_weights": _vec_list(self.soft_weights),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> ResultList:
        _check_keys(d, {"query_id"}, {"query_id", "items", "soft_weights"}, "result_list")
        items = tuple(
            Hit(Document.from_dict(it["document"]), FeatureMap(it["features"])) for it in d.get("items", ())
        )
        return cls(d["query_id"], items, d.get("soft_weights"))


def empty_result(query_id: str = "") -> ResultList:
    return ResultList(query_id)


def validate_result_list(result: ResultList) -> bool:
    """True iff ``result`` is ordered, scored and carries consistent soft weights."""
    keys = []
    for hit in result.items:
        score = hit.features.get("score")
        if score is None or not math.isfinite(score):
            return False
        keys.append((-score, hit.document.id))
    if any(a > b for a, b in zip(keys, keys[1:])):
        return False
    w = result.soft_weights
    if w is not None:
        if len(w) != len(result.items) or np.any(w < 0) or not np.all(np.isfinite(w)):
            return False
        if abs(float(np.sum(w)) - 1.0) > SUM_TOL:
            return False
    return True


@dataclass(frozen=True, eq=False)
class TrainingExample:
    x: np.ndarray | tuple[int, ...]
    y: float | int
    session_id: str | None = None

    def __post_init__(self) -> None:
        if isinstance(self.x, tuple) and all(isinstance(t, (int, np.integer)) for t in self.x):
            object.__setattr__(self, "x", tuple(int(t) for t in self.x))
        else:
            object.__setattr__(self, "x", _frozen_vector(self.x))
        if isinstance(self.y, np.generic):
            object.__setattr__(self, "y", self.y.item())

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TrainingExample):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    def to_dict(self) -> dict[str, Any]:
        x = list(self.x) if isinstance(self.x, tuple) else _vec_list(self.x)
        return {"session_id": self.session_id, "x": x, "y": self.y}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> TrainingExample:
        _check_keys(d, {"x", "y"}, {"session_id", "x", "y"}, "example")
        x = d["x"]
        if x and all(isinstance(v, int) and not isinstance(v, bool) for v in x):
            x = tuple(x)
        return cls(x, d["y"], d.get("session_id"))


@dataclass(frozen=True, eq=False)
class Dataset:
    examples: tuple[TrainingExample, ...]
    task_kind: str

    def __post_init__(self) -> None:
        object.__setattr__(self, "examples", tuple(self.examples))
        if self.task_kind not in TASK_KINDS:
            raise ValueError(f"task_kind must be one of {TASK_KINDS}, got {self.task_kind!r}")
        if not self.examples:
            raise ValueError("empty dataset")
        dims = {len(ex.x) for ex in self.examples}
        if len(dims) != 1:
            raise ValueError(f"inconsistent input dimensions {sorted(dims)}")

    def __len__(self) -> int:
        return len(self.examples)

    def __getitem__(self, i: int) -> TrainingExample:
        return self.examples[i]

    def __iter__(self) -> Iterator[TrainingExample]:
        return iter(self.examples)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return self.task_kind == other.task_kind and self.examples == other.examples

    @cached_property
    def X(self) -> np.ndarray:
        return np.array([np.asarray(ex.x, dtype=np.float64) for ex in self.examples])

    @cached_property
    def Y(self) -> np.ndarray:
        dtype = np.float64 if self.task_kind == "regression" else np.int64
        return np.array([ex.y for ex in self.examples], dtype=dtype)

    @property
    def session_ids(self) -> list[str]:
        return [ex.session_id or f"s{i}" for i, ex in enumerate(self.examples)]

    def subset(self, indices: Sequence[int]) -> Dataset:
        return Dataset(tuple(self.examples[i] for i in indices), self.task_kind)


@dataclass(frozen=True, eq=False)
class Feedback:
    query_id: str
    model_id: str
    kind: str
    value: float | np.ndarray
    document_ids: tuple[int, ...] | None = None

    def __post_init__(self) -> None:
        if self.kind not in FEEDBACK_KINDS:
            raise ValueError(f"feedback kind must be one of {FEEDBACK_KINDS}, got {self.kind!r}")
        if self.kind == "scalar_utility_gain":
            v = float(self.value)
            if not math.isfinite(v):
                raise ValueError("feedback value is not finite")
            object.__setattr__(self, "value", v)
        else:
            object.__setattr__(self, "value", _frozen_vector(self.value))
        if self.document_ids is not None:
            ids = tuple(int(i) for i in self.document_ids)
            if self.kind == "per_document_utility" and len(ids) != len(self.value):
                raise ValueError(f"{len(ids)} document ids for {len(self.value)} utilities")
            object.__setattr__(self, "document_ids", ids)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Feedback):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    def to_dict(self) -> dict[str, Any]:
        value = self.value if isinstance(self.value, float) else _vec_list(self.value)
        return {
            "query_id": self.query_id,
            "model_id": self.model_id,
            "kind": self.kind,
            "value": value,
            "document_ids": None if self.document_ids is None else list(self.document_ids),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> Feedback:
        _check_keys(
            d, {"query_id", "model_id", "kind", "value"}, {"query_id", "model_id", "kind", "value", "document_ids"}, "feedback"
        )
        return cls(str(d["query_id"]), str(d["model_id"]), d["kind"], d["value"], d.get("document_ids"))


class Collection:
    """A document store with a fixed vector dimension.

    Documents are kept ordered by id so that the cached score matrix has
    columns in ascending id order; stable sorts over it then implement the
    id tie-break for free. Mutation is reserved for the storage handler.
    """

    def __init__(
        self,
        dimension: int,
        documents: Iterable[Document] = (),
        capacity: int | None = None,
        namespace: str | None = None,
    ):
        if dimension < 1:
            raise ValueError("dimension must be positive")
        if capacity is not None and capacity < 1:
            raise ValueError("capacity must be at least 1")
        self.dimension = int(dimension)
        self.capacity = capacity
        self.namespace = namespace
        self._docs: dict[int, Document] = {}
        self._cache: dict[Any, tuple[np.ndarray, np.ndarray, list[Document]]] = {}
        for doc in documents:
            self.add(doc)

    def __len__(self) -> int:
        return len(self._docs)

    def __contains__(self, doc_id: object) -> bool:
        return doc_id in self._docs

    def __iter__(self) -> Iterator[Document]:
        return (self._docs[i] for i in sorted(self._docs))

    def get(self, doc_id: int) -> Document:
        return self._docs[doc_id]

    def ids(self) -> list[int]:
        return sorted(self._docs)

    def check(self, doc: Document) -> None:
        if doc.vector is not None and len(doc.vector) != self.dimension:
            raise DimensionMismatch(self.dimension, len(doc.vector), f"document {doc.id}")

    def add(self, doc: Document) -> None:
        self.check(doc)
        if doc.id not in self._docs and self.capacity is not None and len(self._docs) >= self.capacity:
            raise RemlError(f"collection at capacity {self.capacity}")
        self._docs[doc.id] = doc
        self._cache.clear()

    def remove(self, doc_id: int) -> Document:
        doc = self._docs.pop(doc_id)
        self._cache.clear()
        return doc

    def owner(self, doc: Document) -> str | None:
        return doc.namespace if doc.namespace is not None else self.namespace

    def visible(self, doc: Document, model_id: str | None) -> bool:
        owner = self.owner(doc)
        return owner is None or owner == model_id

    def view(self, model_id: str | None = None) -> tuple[np.ndarray, np.ndarray, list[Document]]:
        """(ids, vectors, documents) of vector-bearing docs visible to ``model_id``."""
        if model_id not in self._cache:
            docs = [d for d in self if d.vector is not None and self.visible(d, model_id)]
            ids = np.array([d.id for d in docs], dtype=np.int64)
            mat = np.array([d.vector for d in docs]) if docs else np.zeros((0, self.dimension))
            mat.setflags(write=False)
            self._cache[model_id] = (ids, mat, docs)
        return self._cache[model_id]


def encode(value: Any) -> str:
    return dumps(value.to_dict())


_DECODERS = {
    "document": Document,
    "query": Query,
    "result_list": ResultList,
    "feedback": Feedback,
    "example": TrainingExample,
}


def decode(kind: str | type, line: str | bytes) -> Any:
    """Inverse of :func:`encode`; ``kind`` is a type or its lowercase name."""
    cls = _DECODERS[kind] if isinstance(kind, str) else kind
    return cls.from_dict(json.loads(line))


def _check_keys(d: Mapping[str, Any], required: set[str], allowed: set[str], what: str) -> None:
    if not isinstance(d, Mapping):
        raise ValueError(f"{what}: expected a JSON object")
    missing = required - d.keys()
    if missing:
        raise ValueError(f"{what}: missing field(s) {sorted(missing)}")
    extra = d.keys() - allowed
    if extra:
        raise ValueError(f"{what}: unknown field(s) {sorted(extra)}")
