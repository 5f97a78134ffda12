import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from reml.access import InformationAccessModel
from reml.core import Collection, DimensionMismatch, Document, FeatureMap, Hit, NotDifferentiable, RemlError, ResultList, empty_result
from reml.gradcheck import check_model_gradients, numerical_gradient, relative_error
from reml.models import (
    AugmentedLinearModel,
    KnnInterpolatedModel,
    MemoryWritingModel,
    interpolate,
    knn_distribution,
    load_checkpoint,
    predict,
    read_checkpoint,
    reml_category,
    save_checkpoint,
)
from reml.querygen import QueryStrategy
from reml.response import ResponseProcessor
from reml.retrieval import DenseRetriever
from reml.storage import StorageHandler

from conftest import random_collection


def _labelled(rng, n=6, d=2, classes=None):
    return random_collection(rng, n, d, labels=True, classes=classes)


def _hits(labels, scores):
    docs = [Document(i, vector=[0.0], payload_label=l) for i, l in enumerate(labels)]
    return ResultList("q", tuple(Hit(d, FeatureMap({"score": s})) for d, s in zip(docs, scores)))


def _knn(n_classes=3, lam=0.5, beta=1.0, d=2):
    return KnnInterpolatedModel(AugmentedLinearModel(d, (), "next_token", n_classes=n_classes), lam, beta)


def test_zero_weights_predict_bias():
    acc = [InformationAccessModel(DenseRetriever(_labelled(np.random.default_rng(0))), processor=ResponseProcessor(append_label=True))]
    m = AugmentedLinearModel.for_access(2, acc)
    m.b[:] = 0.7
    assert predict(m, np.array([3.0, -1.0]), acc) == 0.7


def test_gate_off_equals_empty_responses():
    rng = np.random.default_rng(1)
    coll = _labelled(rng)
    acc = [InformationAccessModel(DenseRetriever(coll), QueryStrategy(gate=lambda x: False), ResponseProcessor(append_label=True))]
    m = AugmentedLinearModel.for_access(2, acc, init_scale=1.0, seed=2)
    x = np.array([0.3, 0.1])
    assert predict(m, x, acc) == m.predict_from_lists(x, [[]], acc)
    assert predict(m, x, acc) == m.predict_from_vectors(x, [np.zeros(3)])


def test_access_dimension_mismatch_names_model():
    coll = _labelled(np.random.default_rng(0))
    acc = [InformationAccessModel(DenseRetriever(coll))]
    m = AugmentedLinearModel(2, (5,), model_id="alpha")
    with pytest.raises(DimensionMismatch, match="alpha"):
        predict(m, np.zeros(2), acc)


def test_multiple_access_concatenated_in_order():
    rng = np.random.default_rng(3)
    a1 = InformationAccessModel(DenseRetriever(_labelled(rng)), k=1)
    a2 = InformationAccessModel(DenseRetriever(_labelled(rng)), k=1)
    m = AugmentedLinearModel.for_access(2, [a1, a2], init_scale=1.0, seed=0)
    x = np.array([0.5, -0.2])
    r1 = a1.represent(a1.respond(x, "s", m.model_id))
    r2 = a2.represent(a2.respond(x, "s", m.model_id))
    expected = float(np.concatenate([x, r1, r2]) @ m.W[0] + m.b[0])
    assert predict(m, x, [a1, a2]) == pytest.approx(expected, abs=1e-12)


def test_knn_single_neighbor_mass():
    np.testing.assert_array_equal(knn_distribution(_knn(), _hits([2], [0.4])), [0.0, 0.0, 1.0])


def test_knn_equal_scores_split():
    np.testing.assert_array_equal(knn_distribution(_knn(), _hits([1, 2], [0.3, 0.3])), [0.0, 0.5, 0.5])


def test_knn_empty_uniform():
    np.testing.assert_array_equal(knn_distribution(_knn(4), empty_result()), [0.25] * 4)


def test_knn_missing_label_errors():
    with pytest.raises(RemlError):
        knn_distribution(_knn(), _hits([None], [0.0]))


def test_interpolate_midpoint_and_endpoints():
    p, q = np.array([0.8, 0.2]), np.array([0.2, 0.8])
    assert interpolate(_knn(2, 0.5), p, q)[0] == 0.5
    np.testing.assert_array_equal(interpolate(_knn(2, 0.0), p, q), q)
    np.testing.assert_array_equal(interpolate(_knn(2, 1.0), p, q), p)
    with pytest.raises(ValueError):
        interpolate(_knn(2), p, np.ones(3) / 3)


def test_lambda_one_equals_parametric():
    rng = np.random.default_rng(4)
    coll = _labelled(rng, classes=3)
    acc = [InformationAccessModel(DenseRetriever(coll), k=3)]
    knn = _knn(3, 1.0)
    knn.parametric.W[:] = rng.normal(size=knn.parametric.W.shape)
    x = rng.normal(size=2)
    np.testing.assert_array_equal(predict(knn, x, acc), knn.parametric.predict_from_vectors(x, []))


def test_lambda_one_zero_retrieval_gradient():
    rng = np.random.default_rng(5)
    coll = _labelled(rng, classes=3)
    acc = [InformationAccessModel(DenseRetriever(coll, projection=np.eye(2)), k=3)]
    knn = _knn(3, 1.0)
    _, grads = knn.batch_loss_and_gradients(rng.normal(size=(4, 2)), np.array([0, 1, 2, 0]), list("abcd"), acc, soft=True)
    assert not grads["a0.M"].any()


def test_knn_validation():
    with pytest.raises(ValueError):
        KnnInterpolatedModel(AugmentedLinearModel(2), 0.5)
    with pytest.raises(ValueError):
        _knn(lam=1.5)
    with pytest.raises(NotDifferentiable):
        _knn().response_gradient()


@given(st.integers(0, 10_000), st.floats(0, 1), st.floats(0.1, 10))
def test_distributions_normalized(seed, lam, beta):
    rng = np.random.default_rng(seed)
    coll = _labelled(rng, classes=4)
    acc = [InformationAccessModel(DenseRetriever(coll), k=3)]
    knn = _knn(4, lam, beta)
    knn.parametric.W[:] = rng.normal(size=knn.parametric.W.shape)
    X = rng.normal(size=(5, 2))
    for P in (knn.predict_batch(X, list("abcde"), acc), knn.predict_batch(X, list("abcde"), acc, disabled=True)):
        assert np.all(P >= 0)
        np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-9)


def test_zero_gradients_at_constructed_minimum():
    # y = 2*x0 - r_label exactly, so the squared loss is zero at these weights
    rng = np.random.default_rng(6)
    coll = _labelled(rng, 8)
    acc = [InformationAccessModel(DenseRetriever(coll, projection=np.eye(2)), processor=ResponseProcessor(append_label=True), k=8)]
    m = AugmentedLinearModel.for_access(2, acc)
    m.W[0] = [2.0, 0.0, 0.0, 0.0, -1.0]
    X = rng.normal(size=(6, 2))
    R, _ = acc[0].forward(X, list("abcdef"), m.model_id, soft=True)
    Y = 2 * X[:, 0] - R[:, 2]
    loss, grads = m.batch_loss_and_gradients(X, Y, list("abcdef"), acc, soft=True)
    assert loss < 1e-25
    for g in grads.values():
        assert np.max(np.abs(g)) < 1e-9


def _augmented_config(s):
    rng = np.random.default_rng(s)
    d, din, n = 4, 3, 7
    coll = random_collection(rng, n, d, labels=True)
    r = DenseRetriever(coll, "cosine" if s % 2 else "inner_product", projection=rng.normal(size=(d, d)))
    a = InformationAccessModel(
        r, QueryStrategy("linear", rng.normal(size=(2, d, din)), n_queries=2), ResponseProcessor(append_label=True), k=3
    )
    a.enable_personalization("m")[:] = rng.normal(size=d)
    task = "regression" if s % 3 else "classification"
    m = AugmentedLinearModel.for_access(din, [a], task, n_classes=3, model_id="m", init_scale=0.5, seed=s)
    X = rng.normal(size=(5, din))
    Y = rng.normal(size=5) if task == "regression" else rng.integers(0, 3, 5)
    return m, [a], X, Y, float(rng.uniform(0.2, 2.0))


@pytest.mark.parametrize("seed", range(50))
def test_augmented_gradients_match_finite_differences(seed):
    m, acc, X, Y, tau = _augmented_config(seed)
    check = check_model_gradients(m, acc, X, Y, [f"q{i}" for i in range(5)], True, tau)
    assert {"W", "b", "a0.W_q", "a0.M", "a0.P.m"} <= set(check.errors)
    assert check.ok, check.errors


@pytest.mark.parametrize("seed", range(20))
def test_knn_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    coll = random_collection(rng, 7, 4, labels=True, classes=3)
    acc = [InformationAccessModel(DenseRetriever(coll, projection=rng.normal(size=(4, 4))), k=3)]
    p = AugmentedLinearModel(4, (), "next_token", n_classes=3, init_scale=0.5, seed=seed)
    m = KnnInterpolatedModel(p, lam=0.3, beta=1.5)
    check = check_model_gradients(m, acc, rng.normal(size=(5, 4)), rng.integers(0, 3, 5), list("abcde"), True)
    assert check.ok, check.errors


def test_numerical_gradient_restores_parameters():
    w = np.array([1.0, 2.0])
    g = numerical_gradient(lambda: float(w @ w), {"w": w})
    np.testing.assert_allclose(g["w"], [2.0, 4.0], atol=1e-8)
    np.testing.assert_array_equal(w, [1.0, 2.0])
    assert relative_error(np.zeros(2), np.zeros(2)) == 0.0


def test_soft_requires_dense_retriever():
    from reml.retrieval import RandomRetriever

    coll = _labelled(np.random.default_rng(0))
    acc = [InformationAccessModel(RandomRetriever(coll, 0), processor=ResponseProcessor(append_label=True))]
    m = AugmentedLinearModel.for_access(2, acc)
    with pytest.raises(NotDifferentiable):
        m.loss_and_gradients(np.zeros(2), 0.0, acc, soft=True)


def test_memory_model_without_writes_matches_plain():
    rng = np.random.default_rng(7)
    coll = _labelled(rng)
    acc = [InformationAccessModel(DenseRetriever(coll), processor=ResponseProcessor(append_label=True), k=2, storage=StorageHandler(coll))]
    plain = AugmentedLinearModel.for_access(2, acc, init_scale=1.0, seed=11)
    mem = MemoryWritingModel(AugmentedLinearModel.for_access(2, acc, init_scale=1.0, seed=11))
    X = rng.normal(size=(10, 2))
    sessions = [f"s{i}" for i in range(10)]
    a = plain.predict_batch(X, sessions, acc)
    b = mem.predict_batch(X, sessions, acc)
    assert a.tobytes() == b.tobytes()
    assert reml_category(plain) == 1 and reml_category(mem) == 2
    plain.feedback = mem.inner.feedback = True
    assert reml_category(plain) == 3 and reml_category(mem) == 4


def test_memory_model_writes_label_or_prediction():
    rng = np.random.default_rng(8)
    coll = _labelled(rng, 3)
    acc = [InformationAccessModel(DenseRetriever(coll), processor=ResponseProcessor(append_label=True), k=2, storage=StorageHandler(coll))]
    mem = MemoryWritingModel(AugmentedLinearModel.for_access(2, acc))
    mem.inner.b[:] = 0.25
    x = np.array([0.1, 0.9])
    i = mem.observe(x, 1.5, acc)
    assert coll.get(i).payload_label == 1.5
    np.testing.assert_array_equal(coll.get(i).vector, x)
    j = mem.observe(x, None, acc)
    assert coll.get(j).payload_label == 0.25
    assert mem.writes == 2 and len(coll) == 5


def test_checkpoint_round_trip(tmp_path):
    m, acc, *_ = _augmented_config(3)
    path = tmp_path / "ckpt.json"
    save_checkpoint(path, m, acc)
    header, arrays = read_checkpoint(path)
    assert header["model"] == "augmented_linear"
    theta, omega = m.parameters(acc)
    for name, arr in {**theta, **omega}.items():
        assert arrays[name].tobytes() == arr.tobytes()
    fresh, facc, *_ = _augmented_config(6)
    load_checkpoint(path, fresh, facc)
    save_checkpoint(tmp_path / "again.json", fresh, facc)
    assert path.read_bytes() == (tmp_path / "again.json").read_bytes()


def test_checkpoint_shape_mismatch(tmp_path):
    m = AugmentedLinearModel(2)
    save_checkpoint(tmp_path / "c.json", m)
    with pytest.raises(DimensionMismatch):
        load_checkpoint(tmp_path / "c.json", AugmentedLinearModel(3))
