"""Seeded synthetic tasks small enough to train on a laptop in seconds.

* ``neighbor_regression``: y is the mean label of the k_true nearest
  corpus points, so retrieval of those points makes y linear in the
  response.
* ``hidden_rotation``: the relevant document is the best match for a
  rotated query; a retriever has to learn the rotation.
* ``toy_next_token``: a token stream with a handful of rare repeated
  patterns; a datastore of (context, next token) pairs recalls them.
"""
from __future__ import annotations

from collections.abc import Iterator, Sequence
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from scipy.linalg import expm

from .core import Collection, Dataset, Document, TrainingExample

TASK_KINDS = ("neighbor_regression", "hidden_rotation", "toy_next_token")


@dataclass(frozen=True)
class SyntheticTaskSpec:
    kind: str = "neighbor_regression"
    corpus_size: int = 1000
    dimension: int = 16
    k_true: int = 5
    noise_std: float = 0.05
    seed: int = 0
    n_examples: int = 1000
    split: tuple[float, float, float] = (0.6, 0.2, 0.2)
    rotation_angle: float = 1.0
    context_length: int = 3
    n_patterns: int = 20
    pattern_length: int = 6
    pattern_rate: float = 0.05

    def __post_init__(self) -> None:
        if self.kind not in TASK_KINDS:
            raise ValueError(f"task kind must be one of {TASK_KINDS}, got {self.kind!r}")
        if self.corpus_size < 1 or self.dimension < 1 or self.n_examples < 1:
            raise ValueError("corpus_size, dimension and n_examples must be positive")
        if not 1 <= self.k_true <= self.corpus_size:
            raise ValueError(f"need 1 <= k_true <= corpus_size, got k_true={self.k_true}")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")
        if len(self.split) != 3 or any(s < 0 for s in self.split) or abs(sum(self.split) - 1.0) > 1e-9:
            raise ValueError(f"split must be three non-negative fractions summing to 1, got {self.split}")
        object.__setattr__(self, "split", tuple(float(s) for s in self.split))
        if self.kind == "toy_next_token":
            if self.context_length < 1 or self.pattern_length <= self.context_length:
                raise ValueError("pattern_length must exceed context_length")
            if not 0.0 <= self.pattern_rate < 1.0:
                raise ValueError("pattern_rate must lie in [0, 1)")


@dataclass
class SyntheticTask:
    dataset: Dataset
    collection: Collection
    relevance_map: dict[str, list[int]]
    splits: tuple[Dataset, Dataset, Dataset]
    extras: dict[str, Any] = field(default_factory=dict)

    def __iter__(self) -> Iterator[Any]:
        return iter((self.dataset, self.collection, self.relevance_map))

    @property
    def train(self) -> Dataset:
        return self.splits[0]

    @property
    def val(self) -> Dataset:
        return self.splits[1]

    @property
    def test(self) -> Dataset:
        return self.splits[2]


def _split_indices(n: int, split: Sequence[float]) -> list[np.ndarray]:
    a = int(round(split[0] * n))
    b = a + int(round(split[1] * n))
    return [np.arange(0, a), np.arange(a, b), np.arange(b, n)]


def _unit_rows(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    V = rng.normal(size=(n, d))
    return V / np.linalg.norm(V, axis=1, keepdims=True)


def _assemble(X: np.ndarray, y: np.ndarray, ranking: np.ndarray, docs: list[Document], d: int, spec: SyntheticTaskSpec, extras: dict[str, Any]) -> SyntheticTask:
    sessions = [f"s{i}" for i in range(len(X))]
    examples = tuple(TrainingExample(X[i], float(y[i]), sessions[i]) for i in range(len(X)))
    dataset = Dataset(examples, "regression")
    relevance = {s: [int(j) for j in ranking[i]] for i, s in enumerate(sessions)}
    splits = tuple(dataset.subset(idx) if len(idx) else None for idx in _split_indices(len(X), spec.split))
    return SyntheticTask(dataset, Collection(d, docs), relevance, splits, extras)


def neighbor_regression(spec: SyntheticTaskSpec) -> SyntheticTask:
    rng = np.random.default_rng(spec.seed)
    N, d = spec.corpus_size, spec.dimension
    V = _unit_rows(rng, N, d)
    labels = rng.normal(size=N)
    anchors = rng.integers(0, N, size=spec.n_examples)
    X = V[anchors] + spec.noise_std * rng.normal(size=(spec.n_examples, d))
    dist = np.sum((X[:, None, :] - V[None, :, :]) ** 2, axis=2)
    ranking = np.argsort(dist, axis=1, kind="stable")
    y = labels[ranking[:, : spec.k_true]].mean(axis=1) + spec.noise_std * rng.normal(size=spec.n_examples)
    docs = [Document(i, vector=V[i], payload_label=float(labels[i])) for i in range(N)]
    return _assemble(X, y, ranking, docs, d, spec, {"labels": labels})


def random_rotation(rng: np.random.Generator, d: int, angle: float) -> np.ndarray:
    """exp(angle * A) for a random skew-symmetric A of unit spectral norm."""
    A = rng.normal(size=(d, d))
    A = A - A.T
    A /= np.linalg.norm(A, 2)
    return expm(angle * A)


def hidden_rotation(spec: SyntheticTaskSpec) -> SyntheticTask:
    rng = np.random.default_rng(spec.seed)
    N, d = spec.corpus_size, spec.dimension
    V = _unit_rows(rng, N, d)
    labels = rng.normal(size=N)
    R = random_rotation(rng, d, spec.rotation_angle)
    X = rng.normal(size=(spec.n_examples, d))
    S = (X @ R.T) @ V.T
    ranking = np.argsort(-S, axis=1, kind="stable")
    y = labels[ranking[:, : spec.k_true]].mean(axis=1) + spec.noise_std * rng.normal(size=spec.n_examples)
    docs = [Document(i, vector=V[i], payload_label=float(labels[i])) for i in range(N)]
    return _assemble(X, y, ranking, docs, d, spec, {"labels": labels, "rotation": R})


def bag_of_context(tokens: Sequence[int], vocab_size: int) -> np.ndarray:
    """Unit-normalized token counts of a context window."""
    v = np.bincount(np.asarray(tokens, dtype=np.int64), minlength=vocab_size).astype(np.float64)
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


def toy_stream(spec: SyntheticTaskSpec, rng: np.random.Generator) -> tuple[list[int], np.ndarray]:
    """Background Zipf tokens with patterns spliced in at ``pattern_rate``."""
    V = spec.dimension
    patterns = rng.integers(0, V, size=(spec.n_patterns, spec.pattern_length))
    ranks = np.arange(1, V + 1, dtype=np.float64)
    zipf = (1.0 / ranks) / np.sum(1.0 / ranks)
    total = spec.corpus_size + spec.n_examples + spec.context_length
    stream: list[int] = []
    while len(stream) < total:
        if rng.random() < spec.pattern_rate:
            stream.extend(int(t) for t in patterns[rng.integers(spec.n_patterns)])
        else:
            stream.append(int(rng.choice(V, p=zipf)))
    return stream[:total], patterns


def toy_next_token(spec: SyntheticTaskSpec) -> SyntheticTask:
    """The first ``corpus_size`` predictions form the datastore; the
    following ``n_examples`` are split into train/val/test, so every
    pattern can recur in held-out text after showing up in the datastore.
    """
    rng = np.random.default_rng(spec.seed)
    V, n = spec.dimension, spec.context_length
    stream, patterns = toy_stream(spec, rng)
    contexts = np.array([bag_of_context(stream[t - n : t], V) for t in range(n, len(stream))])
    nexts = np.array(stream[n:], dtype=np.int64)
    docs = [Document(i, vector=contexts[i], payload_label=int(nexts[i])) for i in range(spec.corpus_size)]
    X = contexts[spec.corpus_size :]
    y = nexts[spec.corpus_size :]
    sessions = [f"s{i}" for i in range(len(X))]
    examples = tuple(TrainingExample(X[i], int(y[i]), sessions[i]) for i in range(len(X)))
    dataset = Dataset(examples, "next_token")
    splits = tuple(dataset.subset(idx) for idx in _split_indices(len(X), spec.split))
    store_data = Dataset(
        tuple(TrainingExample(contexts[i], int(nexts[i]), f"m{i}") for i in range(spec.corpus_size)),
        "next_token",
    )
    return SyntheticTask(dataset, Collection(V, docs), {}, splits, {"patterns": patterns, "stream": stream, "datastore": store_data})


_BUILDERS = {
    "neighbor_regression": neighbor_regression,
    "hidden_rotation": hidden_rotation,
    "toy_next_token": toy_next_token,
}


def make_task(spec: SyntheticTaskSpec) -> SyntheticTask:
    return _BUILDERS[spec.kind](spec)


def disjoint_subset_tasks(
    seed: int, corpus_size: int = 100, dimension: int = 8, n_examples: int = 600, noise_std: float = 0.05, separation: float = 1.0
) -> tuple[Collection, list[SyntheticTask]]:
    """Two prediction models over one shared corpus, each served only by
    its own half.

    Documents carry a group sign on their last coordinate; inputs have a
    zero last coordinate, so only a per-model query offset can steer
    retrieval toward the right half.
    """
    rng = np.random.default_rng(seed)
    d = dimension
    Z = _unit_rows(rng, corpus_size, d - 1)
    group = np.where(np.arange(corpus_size) % 2 == 0, 1.0, -1.0)
    V = np.hstack([Z, separation * group[:, None]])
    V /= np.linalg.norm(V, axis=1, keepdims=True)
    labels = rng.normal(size=corpus_size)
    docs = [Document(i, vector=V[i], payload_label=float(labels[i])) for i in range(corpus_size)]
    collection = Collection(d, docs)
    spec = SyntheticTaskSpec("hidden_rotation", corpus_size, d, 1, noise_std, seed, n_examples)
    tasks = []
    for sign in (1.0, -1.0):
        X = np.hstack([rng.normal(size=(n_examples, d - 1)), np.zeros((n_examples, 1))])
        S = X @ V.T
        S = np.where(group[None, :] == sign, S, -np.inf)
        ranking = np.argsort(-S, axis=1, kind="stable")
        y = labels[ranking[:, 0]] + noise_std * rng.normal(size=n_examples)
        tasks.append(_assemble(X, y, ranking, docs, d, spec, {"labels": labels, "group": sign}))
    return collection, tasks
