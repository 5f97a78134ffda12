"""Reference prediction models.

Models are deliberately shallow so gradients stay analytic. Each model
takes the sequence of information access models it talks to on every
call; the processed responses of several access models are concatenated
in the order given.
"""
from __future__ import annotations

import itertools
import json
from collections.abc import Sequence
from pathlib import Path
from typing import Any, Protocol

import numpy as np

from .access import InformationAccessModel
from .core import TASK_KINDS, DimensionMismatch, Document, NotDifferentiable, RemlError, ResultList, dumps
from .retrieval import softmax, softmax_backward

CHECKPOINT_FORMAT = "reml-checkpoint"

Access = Sequence[InformationAccessModel]


class PredictionModel(Protocol):
    model_id: str
    task_kind: str
    kind: str

    def predict(self, x: Any, access: Access, session_id: str | None = None) -> Any: ...

    def predict_from_lists(self, x: Any, responses: Sequence[Sequence[ResultList]], access: Access) -> Any: ...

    def predict_batch(self, X: np.ndarray, sessions: Sequence[str], access: Access, disabled: bool = False) -> Any: ...

    def batch_loss_and_gradients(
        self, X: np.ndarray, Y: np.ndarray, sessions: Sequence[str], access: Access, soft: bool = False, temperature: float = 1.0
    ) -> tuple[float, dict[str, np.ndarray]]: ...

    def parameters(self, access: Access = ()) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]: ...


def _prefixed(access: Access, model_id: str) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    theta: dict[str, np.ndarray] = {}
    omega: dict[str, np.ndarray] = {}
    for j, a in enumerate(access):
        t, o = a.parameters(model_id)
        theta.update({f"a{j}.{k}": v for k, v in t.items()})
        omega.update({f"a{j}.{k}": v for k, v in o.items()})
    return theta, omega


def per_example_loss(Z: np.ndarray, Y: np.ndarray, task_kind: str) -> np.ndarray:
    if task_kind == "regression":
        return (Z[:, 0] - Y) ** 2
    top = np.max(Z, axis=1)
    lse = top + np.log(np.sum(np.exp(Z - top[:, None]), axis=1))
    return lse - Z[np.arange(len(Z)), Y.astype(np.int64)]


def loss_grad_logits(Z: np.ndarray, Y: np.ndarray, task_kind: str) -> np.ndarray:
    """d(per-example loss)/dZ, not yet averaged over the batch."""
    if task_kind == "regression":
        G = np.zeros_like(Z)
        G[:, 0] = 2.0 * (Z[:, 0] - Y)
        return G
    G = softmax(Z, axis=1)
    G[np.arange(len(Z)), Y.astype(np.int64)] -= 1.0
    return G


class AugmentedLinearModel:
    """Linear map over the concatenation of x and the processed responses.

    Regression emits a scalar and is trained on squared error;
    classification and next-token tasks emit a softmax distribution and
    are trained on cross-entropy.
    """

    kind = "augmented_linear"

    def __init__(
        self,
        input_dim: int,
        response_dims: Sequence[int] = (),
        task_kind: str = "regression",
        n_classes: int | None = None,
        model_id: str = "model",
        feedback: bool = False,
        init_scale: float = 0.0,
        seed: int = 0,
    ):
        if task_kind not in TASK_KINDS:
            raise ValueError(f"task_kind must be one of {TASK_KINDS}, got {task_kind!r}")
        if task_kind != "regression" and not n_classes:
            raise ValueError(f"{task_kind} needs n_classes")
        self.input_dim = int(input_dim)
        self.response_dims = tuple(int(d) for d in response_dims)
        self.task_kind = task_kind
        self.n_classes = n_classes
        self.model_id = model_id
        self.feedback = feedback
        out = 1 if task_kind == "regression" else int(n_classes)
        width = self.input_dim + sum(self.response_dims)
        rng = np.random.default_rng(seed)
        self.W = rng.normal(0.0, init_scale, (out, width)) if init_scale else np.zeros((out, width))
        self.b = np.zeros(out)
        self._session_counter = itertools.count()

    @classmethod
    def for_access(cls, input_dim: int, access: Access, task_kind: str = "regression", **kw: Any) -> AugmentedLinearModel:
        for a in access:
            a.check_input(input_dim)
        return cls(input_dim, [a.output_dim for a in access], task_kind, **kw)

    @property
    def output_dim(self) -> int:
        return self.W.shape[0]

    def hyperparameters(self) -> dict[str, Any]:
        return {
            "input_dim": self.input_dim,
            "response_dims": list(self.response_dims),
            "task_kind": self.task_kind,
            "n_classes": self.n_classes,
            "model_id": self.model_id,
            "feedback": self.feedback,
        }

    def new_session(self) -> str:
        return f"{self.model_id}-{next(self._session_counter)}"

    def check_access(self, access: Access) -> None:
        if len(access) != len(self.response_dims):
            raise DimensionMismatch(len(self.response_dims), len(access), f"{self.model_id}: access model count")
        for j, (a, d) in enumerate(zip(access, self.response_dims)):
            if a.output_dim != d:
                raise DimensionMismatch(d, a.output_dim, f"{self.model_id}: response of access model {j}")

    def _matrix(self, X: Any) -> np.ndarray:
        if isinstance(X, tuple):
            raise RemlError(f"{self.kind} needs dense inputs, got a token sequence")
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.input_dim:
            raise DimensionMismatch(self.input_dim, X.shape[1], f"{self.model_id}: input")
        return X

    def logits(self, X: np.ndarray, responses: Sequence[np.ndarray]) -> np.ndarray:
        F = np.hstack([X, *responses]) if responses else X
        return F @ self.W.T + self.b

    def outputs(self, Z: np.ndarray) -> np.ndarray:
        return Z[:, 0] if self.task_kind == "regression" else softmax(Z, axis=1)

    def _single(self, out: np.ndarray) -> Any:
        return float(out[0]) if self.task_kind == "regression" else out[0]

    def predict_from_vectors(self, x: Any, responses: Sequence[np.ndarray]) -> Any:
        X = self._matrix(x)
        return self._single(self.outputs(self.logits(X, [np.atleast_2d(r) for r in responses])))

    def predict_from_lists(self, x: Any, responses: Sequence[Sequence[ResultList]], access: Access) -> Any:
        self.check_access(access)
        return self.predict_from_vectors(x, [a.represent(lists) for a, lists in zip(access, responses)])

    def predict(self, x: Any, access: Access, session_id: str | None = None) -> Any:
        self.check_access(access)
        sid = session_id or self.new_session()
        return self.predict_from_vectors(x, [a.represent(a.respond(x, sid, self.model_id)) for a in access])

    def responses(
        self, X: np.ndarray, sessions: Sequence[str], access: Access, soft: bool = False, temperature: float = 1.0
    ) -> tuple[list[np.ndarray], list[Any]]:
        self.check_access(access)
        Rs, states = [], []
        for a in access:
            R, state = a.forward(X, sessions, self.model_id, soft, temperature)
            Rs.append(R)
            states.append(state)
        return Rs, states

    def predict_batch(
        self, X: np.ndarray, sessions: Sequence[str], access: Access, disabled: bool | Sequence[int] = False
    ) -> np.ndarray:
        """``disabled`` turns off every access model, or the listed slots."""
        X = self._matrix(X)
        self.check_access(access)
        off = set(range(len(access))) if disabled is True else set(disabled or ())
        Rs = []
        for j, (a, d) in enumerate(zip(access, self.response_dims)):
            if j in off:
                Rs.append(np.zeros((len(X), d)))
            else:
                Rs.append(a.forward(X, sessions, self.model_id)[0])
        return self.outputs(self.logits(X, Rs))

    def batch_loss_and_gradients(
        self,
        X: np.ndarray,
        Y: np.ndarray,
        sessions: Sequence[str],
        access: Access,
        soft: bool = False,
        temperature: float = 1.0,
    ) -> tuple[float, dict[str, np.ndarray]]:
        X = self._matrix(X)
        Rs, states = self.responses(X, sessions, access, soft, temperature)
        F = np.hstack([X, *Rs]) if Rs else X
        Z = F @ self.W.T + self.b
        loss = float(np.mean(per_example_loss(Z, Y, self.task_kind)))
        G_Z = loss_grad_logits(Z, Y, self.task_kind) / len(X)
        grads = {"W": G_Z.T @ F, "b": G_Z.sum(axis=0)}
        G_F = G_Z @ self.W
        offset = self.input_dim
        for j, (a, state, d) in enumerate(zip(access, states, self.response_dims)):
            for key, g in a.backward(state, G_F[:, offset : offset + d]).items():
                grads[f"a{j}.{key}"] = g
            offset += d
        return loss, grads

    def loss_and_gradients(
        self, x: Any, y: Any, access: Access, soft: bool = False, temperature: float = 1.0, session_id: str | None = None
    ) -> tuple[float, dict[str, np.ndarray]]:
        X = self._matrix(x)
        return self.batch_loss_and_gradients(
            X, np.array([y]), [session_id or self.new_session()], access, soft, temperature
        )

    def response_gradient(
        self, x: Any, y: Any, responses: Sequence[Sequence[ResultList]], access: Access
    ) -> list[np.ndarray]:
        self.check_access(access)
        X = self._matrix(x)
        Rs = [np.atleast_2d(a.represent(lists)) for a, lists in zip(access, responses)]
        Z = self.logits(X, Rs)
        G_F = (loss_grad_logits(Z, np.array([y]), self.task_kind) @ self.W)[0]
        out, offset = [], self.input_dim
        for d in self.response_dims:
            out.append(G_F[offset : offset + d].copy())
            offset += d
        return out

    def parameters(self, access: Access = ()) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
        theta, omega = _prefixed(access, self.model_id)
        return {"W": self.W, "b": self.b, **theta}, omega


class KnnInterpolatedModel:
    """Parametric classifier mixed with a neighbour-label distribution.

    The neighbour distribution puts mass ``exp(beta * score)`` on each
    retrieved document's label; ``lam`` weights the parametric side.
    Only the first access model is consulted.
    """

    kind = "knn_interpolated"

    def __init__(self, parametric: AugmentedLinearModel, lam: float = 0.5, beta: float = 1.0):
        if parametric.task_kind == "regression":
            raise ValueError("KNN interpolation needs a classification or next-token model")
        if parametric.response_dims:
            raise ValueError("the parametric model must use x only")
        if not 0.0 <= lam <= 1.0:
            raise ValueError(f"lambda must be in [0, 1], got {lam}")
        if not beta > 0:
            raise ValueError(f"beta must be positive, got {beta}")
        self.parametric = parametric
        self.lam = float(lam)
        self.beta = float(beta)
        self.feedback = False

    @property
    def model_id(self) -> str:
        return self.parametric.model_id

    @property
    def task_kind(self) -> str:
        return self.parametric.task_kind

    @property
    def n_classes(self) -> int:
        return self.parametric.output_dim

    def hyperparameters(self) -> dict[str, Any]:
        return {"lambda": self.lam, "beta": self.beta, "parametric": self.parametric.hyperparameters()}

    def _labels(self, docs: Sequence[Document]) -> np.ndarray:
        labels = []
        for d in docs:
            if d.payload_label is None:
                raise RemlError(f"document {d.id} carries no payload_label")
            labels.append(int(d.payload_label))
        labels = np.array(labels, dtype=np.int64)
        if len(labels) and (labels.min() < 0 or labels.max() >= self.n_classes):
            raise RemlError(f"payload labels must lie in [0, {self.n_classes})")
        return labels

    def knn_distribution(self, result: ResultList) -> np.ndarray:
        if not result.items:
            return np.full(self.n_classes, 1.0 / self.n_classes)
        u = softmax(self.beta * result.scores)
        p = np.zeros(self.n_classes)
        np.add.at(p, self._labels(result.documents), u)
        return p

    def interpolate(self, p_param: np.ndarray, p_knn: np.ndarray) -> np.ndarray:
        p_param = np.asarray(p_param, dtype=np.float64)
        p_knn = np.asarray(p_knn, dtype=np.float64)
        if p_param.shape != p_knn.shape:
            raise ValueError(f"distribution shapes differ: {p_param.shape} vs {p_knn.shape}")
        return self.lam * p_param + (1.0 - self.lam) * p_knn

    def _knn_from_lists(self, lists: Sequence[ResultList]) -> np.ndarray:
        if not lists:
            return np.full(self.n_classes, 1.0 / self.n_classes)
        return np.mean([self.knn_distribution(lst) for lst in lists], axis=0)

    def predict_from_lists(self, x: Any, responses: Sequence[Sequence[ResultList]], access: Access) -> np.ndarray:
        p_param = self.parametric.predict_from_vectors(x, [])
        return self.interpolate(p_param, self._knn_from_lists(responses[0] if responses else []))

    def predict(self, x: Any, access: Access, session_id: str | None = None) -> np.ndarray:
        sid = session_id or self.parametric.new_session()
        return self.predict_from_lists(x, [access[0].respond(x, sid, self.model_id)], access)

    def _knn_batch(self, X: np.ndarray, sessions: Sequence[str], access: Access, soft: bool) -> tuple[np.ndarray, Any]:
        a = access[0]
        if soft:
            if not a.dense or a.strategy.n_queries != 1:
                raise NotDifferentiable(f"{type(a.retriever).__name__} has no soft retrieval")
            state = a.score_batch(X, self.model_id)
            if not state.docs:
                raise RemlError("soft retrieval over an empty collection")
            U = softmax(self.beta * state.scores[0], axis=1)
            onehot = np.eye(self.n_classes)[self._labels(state.docs)]
            state.weights = [U]
            state.contents = onehot
            P = U @ onehot
            uniform = np.full(self.n_classes, 1.0 / self.n_classes)
            return np.where(state.gate[:, None], P, uniform), state
        P = np.zeros((len(X), self.n_classes))
        if a.dense and a.strategy.n_queries == 1:
            state = a.score_batch(X, self.model_id)
            if not state.docs:
                return P + 1.0 / self.n_classes, None
            S = state.scores[0]
            k = min(a.k, S.shape[1])
            order = np.argsort(-S, axis=1, kind="stable")[:, :k]
            u = softmax(self.beta * np.take_along_axis(S, order, axis=1), axis=1)
            onehot = np.eye(self.n_classes)[self._labels(state.docs)]
            P = np.einsum("bk,bkc->bc", u, onehot[order])
            return np.where(state.gate[:, None], P, 1.0 / self.n_classes), None
        for b, (x, sid) in enumerate(zip(X, sessions)):
            P[b] = self._knn_from_lists(a.respond(x, sid, self.model_id))
        return P, None

    def predict_batch(self, X: np.ndarray, sessions: Sequence[str], access: Access, disabled: bool = False) -> np.ndarray:
        X = self.parametric._matrix(X)
        p_param = self.parametric.outputs(self.parametric.logits(X, []))
        if disabled:
            p_knn = np.full_like(p_param, 1.0 / self.n_classes)
        else:
            p_knn, _ = self._knn_batch(X, sessions, access, soft=False)
        return self.lam * p_param + (1.0 - self.lam) * p_knn

    def batch_loss_and_gradients(
        self,
        X: np.ndarray,
        Y: np.ndarray,
        sessions: Sequence[str],
        access: Access,
        soft: bool = False,
        temperature: float = 1.0,
    ) -> tuple[float, dict[str, np.ndarray]]:
        X = self.parametric._matrix(X)
        Y = np.asarray(Y, dtype=np.int64)
        rows = np.arange(len(X))
        Z = self.parametric.logits(X, [])
        p_param = softmax(Z, axis=1)
        p_knn, state = self._knn_batch(X, sessions, access, soft)
        p_y = self.lam * p_param[rows, Y] + (1.0 - self.lam) * p_knn[rows, Y]
        with np.errstate(divide="ignore"):
            loss = float(np.mean(-np.log(p_y)))
        g_y = -1.0 / (p_y * len(X))
        onehot_y = np.zeros_like(p_param)
        onehot_y[rows, Y] = 1.0
        G_Z = (self.lam * g_y * p_param[rows, Y])[:, None] * (onehot_y - p_param)
        grads = {"W": G_Z.T @ X, "b": G_Z.sum(axis=0)}
        if state is not None:
            G_U = (1.0 - self.lam) * g_y[:, None] * state.contents[:, Y].T
            G_S = softmax_backward(state.weights[0], G_U, 1.0 / self.beta)
            for key, g in access[0].scores_backward(state, [G_S]).items():
                grads[f"a0.{key}"] = g
        return loss, grads

    def loss_and_gradients(
        self, x: Any, y: Any, access: Access, soft: bool = False, temperature: float = 1.0, session_id: str | None = None
    ) -> tuple[float, dict[str, np.ndarray]]:
        X = self.parametric._matrix(x)
        return self.batch_loss_and_gradients(
            X, np.array([y]), [session_id or self.parametric.new_session()], access, soft, temperature
        )

    def response_gradient(self, *args: Any, **kw: Any) -> list[np.ndarray]:
        raise NotDifferentiable(f"{self.kind} model consumes result lists directly, not a response vector")

    def parameters(self, access: Access = ()) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
        theta, omega = _prefixed(access[:1], self.model_id)
        return {"W": self.parametric.W, "b": self.parametric.b, **theta}, omega


class MemoryWritingModel:
    """Wraps a model and writes (query vector, label) documents to storage
    after each labeled example; without a label it writes its own argmax
    (or regression output)."""

    kind = "memory_writing"

    def __init__(self, inner: AugmentedLinearModel, slot: int = 0):
        self.inner = inner
        self.slot = slot
        self.writes = 0

    def __getattr__(self, name: str) -> Any:
        return getattr(self.__dict__["inner"], name)

    def hyperparameters(self) -> dict[str, Any]:
        return {"slot": self.slot, "inner": self.inner.hyperparameters()}

    def observe(self, x: Any, y: Any, access: Access, session_id: str | None = None) -> int:
        a = access[self.slot]
        if y is None:
            pred = self.inner.predict(x, access, session_id)
            y = float(pred) if np.ndim(pred) == 0 else int(np.argmax(pred))
        vector = a.strategy.vectors(x)[0]
        offset = a.personalization.get(self.model_id)
        if offset is not None:
            vector = vector + offset
        doc = Document(a.storage.next_id() if a.storage else len(a.collection), vector=vector, payload_label=y)
        stored = a.store(self.model_id, doc)
        self.writes += 1
        return stored


def reml_category(model: Any) -> int:
    """1 retrieval-only, 2 with memory, 3 with feedback, 4 with both."""
    memory = isinstance(model, MemoryWritingModel)
    return 1 + int(memory) + 2 * int(bool(getattr(model, "feedback", False)))


def predict(model: Any, x: Any, access: Access, session_id: str | None = None) -> Any:
    return model.predict(x, access, session_id)


def knn_distribution(model: KnnInterpolatedModel, result: ResultList) -> np.ndarray:
    return model.knn_distribution(result)


def interpolate(model: KnnInterpolatedModel, p_param: np.ndarray, p_knn: np.ndarray) -> np.ndarray:
    return model.interpolate(p_param, p_knn)


def loss_and_gradients(model: Any, x: Any, y: Any, access: Access, soft: bool = False, **kw: Any) -> tuple[float, dict[str, np.ndarray]]:
    return model.loss_and_gradients(x, y, access, soft=soft, **kw)


# -- checkpoints --------------------------------------------------------


def checkpoint_arrays(model: Any, access: Access = ()) -> dict[str, np.ndarray]:
    theta, omega = model.parameters(access)
    return {**theta, **omega}


def save_checkpoint(path: str | Path, model: Any, access: Access = ()) -> None:
    arrays = checkpoint_arrays(model, access)
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": 1,
        "model": model.kind,
        "hyperparameters": model.hyperparameters(),
        "arrays": [{"name": name, "shape": list(a.shape)} for name, a in arrays.items()],
    }
    lines = [dumps(header)]
    for a in arrays.values():
        rows = a.reshape(1, -1) if a.ndim <= 1 else a.reshape(-1, a.shape[-1])
        lines.extend(json.dumps([float(v) for v in row], allow_nan=False) for row in rows)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_checkpoint(path: str | Path) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    with open(path, encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        if header.get("format") != CHECKPOINT_FORMAT:
            raise RemlError(f"{path}: not a checkpoint")
        arrays = {}
        for spec in header["arrays"]:
            shape = tuple(spec["shape"])
            n_rows = 1 if len(shape) <= 1 else int(np.prod(shape[:-1]))
            rows = [json.loads(fh.readline()) for _ in range(n_rows)]
            arrays[spec["name"]] = np.array(rows, dtype=np.float64).reshape(shape)
    return header, arrays


def load_checkpoint(path: str | Path, model: Any, access: Access = ()) -> dict[str, Any]:
    header, arrays = read_checkpoint(path)
    targets = checkpoint_arrays(model, access)
    if set(arrays) != set(targets):
        raise RemlError(f"{path}: arrays {sorted(arrays)} do not match model {sorted(targets)}")
    for name, value in arrays.items():
        if targets[name].shape != value.shape:
            raise DimensionMismatch(targets[name].size, value.size, f"checkpoint array {name}")
        targets[name][...] = value
    return header
