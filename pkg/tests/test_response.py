import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from reml.core import Document, FeatureMap, Hit, RemlError, ResultList, empty_result
from reml.response import ResponseProcessor, process


def _list(vectors, scores, weights=None, labels=None):
    hits = []
    for i, (v, s) in enumerate(zip(vectors, scores)):
        label = None if labels is None else labels[i]
        doc = Document(i, vector=v, payload_label=label) if v is not None else Document(i, tokens=[i])
        hits.append(Hit(doc, FeatureMap({"score": s})))
    return ResultList("q", tuple(hits), None if weights is None else np.array(weights))


def test_weighted_mean_symmetric():
    out = process(ResponseProcessor(), _list([[2.0, 0.0], [0.0, 2.0]], [0.0, 0.0], [0.5, 0.5]), 2)
    np.testing.assert_array_equal(out, [1.0, 1.0])


def test_weighted_mean_single_result_exact():
    out = process(ResponseProcessor(), _list([[0.3, -0.7]], [5.0]), 2)
    np.testing.assert_array_equal(out, [0.3, -0.7])


@pytest.mark.parametrize("kind", ["weighted_mean", "concat_topk", "score_distribution"])
def test_empty_list_zero_vector(kind):
    p = ResponseProcessor(kind, m=2)
    out = process(p, empty_result(), 3)
    assert out.shape == (p.output_dim(3),) and not out.any()


def test_empty_weighted_mean_dimension_three():
    np.testing.assert_array_equal(process(ResponseProcessor(), empty_result(), 3), [0.0, 0.0, 0.0])


def test_concat_topk_pads():
    out = process(ResponseProcessor("concat_topk", m=3), _list([[1.0, 2.0]], [1.0]), 2)
    np.testing.assert_array_equal(out, [1.0, 2.0, 0.0, 0.0, 0.0, 0.0])


def test_concat_topk_truncates_and_appends_label():
    lst = _list([[1.0, 2.0], [3.0, 4.0]], [2.0, 1.0], labels=[0.5, 0.25])
    out = process(ResponseProcessor("concat_topk", m=1, append_label=True), lst, 2)
    np.testing.assert_array_equal(out, [1.0, 2.0, 0.5])


def test_score_distribution_normalized():
    out = process(ResponseProcessor("score_distribution", m=2), _list([None, None], [2.0, 0.0]), 2)
    e = np.exp([2.0, 0.0])
    np.testing.assert_allclose(out, e / e.sum(), rtol=1e-15)


def test_missing_vector_is_error():
    with pytest.raises(RemlError):
        process(ResponseProcessor(), _list([None], [1.0]), 2)


def test_missing_label_is_error():
    with pytest.raises(RemlError):
        process(ResponseProcessor(append_label=True), _list([[1.0, 0.0]], [1.0]), 2)


def test_bad_m_rejected():
    with pytest.raises(ValueError):
        ResponseProcessor("concat_topk", m=0)


@given(st.integers(0, 10_000), st.integers(1, 8))
def test_weighted_mean_in_convex_hull(seed, n):
    rng = np.random.default_rng(seed)
    V = rng.normal(size=(n, 3))
    out = process(ResponseProcessor(), _list(list(V), list(rng.normal(size=n) * 3)), 3)
    assert np.all(out >= V.min(axis=0) - 1e-12) and np.all(out <= V.max(axis=0) + 1e-12)


@given(st.integers(0, 10_000), st.integers(2, 6))
def test_weighted_mean_permutation_of_equal_scores(seed, n):
    rng = np.random.default_rng(seed)
    V = list(rng.normal(size=(n, 2)))
    perm = rng.permutation(n)
    a = process(ResponseProcessor(), _list(V, [1.0] * n), 2)
    b = process(ResponseProcessor(), _list([V[i] for i in perm], [1.0] * n), 2)
    np.testing.assert_allclose(a, b, atol=1e-12)


@given(st.sampled_from(["weighted_mean", "concat_topk", "score_distribution"]), st.integers(1, 4), st.integers(1, 6), st.booleans())
def test_output_dim_is_fixed(kind, m, d, label):
    p = ResponseProcessor(kind, m, label)
    expected = {"weighted_mean": d + label, "concat_topk": m * (d + label), "score_distribution": m}[kind]
    assert p.output_dim(d) == expected
