import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from reml.core import (
    Collection,
    Dataset,
    DenseVector,
    DimensionMismatch,
    Document,
    FeatureMap,
    Feedback,
    Hit,
    Query,
    ResultList,
    TemplateId,
    TermSet,
    TrainingExample,
    decode,
    encode,
    ranking_key,
    validate_result_list,
)

finite = st.floats(allow_nan=False, allow_infinity=False, width=64)
vectors = st.lists(finite, min_size=1, max_size=6)
names = st.text(min_size=1, max_size=8)
features = st.dictionaries(names, finite, max_size=4)


def _hit(doc_id, score):
    return Hit(Document(doc_id, vector=[0.0]), FeatureMap({"score": score}))


def test_validate_empty_list():
    assert validate_result_list(ResultList("q"))


def test_validate_descending_scores():
    assert validate_result_list(ResultList("q", (_hit(1, 0.9), _hit(2, 0.5))))


def test_validate_rejects_ascending_scores():
    assert not validate_result_list(ResultList("q", (_hit(1, 0.5), _hit(2, 0.9))))


def test_validate_tie_needs_ascending_ids():
    assert validate_result_list(ResultList("q", (_hit(1, 0.5), _hit(2, 0.5))))
    assert not validate_result_list(ResultList("q", (_hit(2, 0.5), _hit(1, 0.5))))


def test_validate_soft_weights():
    items = (_hit(1, 0.9), _hit(2, 0.5))
    assert validate_result_list(ResultList("q", items, [0.7, 0.3]))
    assert not validate_result_list(ResultList("q", items, [0.7, 0.4]))
    assert not validate_result_list(ResultList("q", items, [1.0]))


def test_document_needs_vector_or_tokens():
    with pytest.raises(ValueError):
        Document(1)


def test_feature_map_rejects_non_finite():
    with pytest.raises(ValueError):
        FeatureMap({"score": float("nan")})


def test_feedback_lengths_and_finiteness():
    with pytest.raises(ValueError):
        Feedback("q", "m", "scalar_utility_gain", float("inf"))
    with pytest.raises(ValueError):
        Feedback("q", "m", "per_document_utility", [0.1, 0.2], (1,))


def test_query_k_must_be_positive():
    with pytest.raises(ValueError):
        Query("q", "s", "m", DenseVector([1.0]), k=0)


def test_collection_dimension_checked():
    coll = Collection(2)
    with pytest.raises(DimensionMismatch) as exc:
        coll.add(Document(1, vector=[1.0, 2.0, 3.0]))
    assert exc.value.expected == 2 and exc.value.got == 3


def test_collection_capacity_enforced():
    coll = Collection(1, capacity=1)
    coll.add(Document(1, vector=[1.0]))
    with pytest.raises(Exception):
        coll.add(Document(2, vector=[1.0]))


def test_dataset_invariants():
    with pytest.raises(ValueError, match="empty dataset"):
        Dataset((), "regression")
    with pytest.raises(ValueError):
        Dataset((TrainingExample([1.0], 0.0), TrainingExample([1.0, 2.0], 0.0)), "regression")


def test_field_order_ids_first_metadata_last():
    q = Query("q1", "s1", "m", DenseVector([1.0]), 3, FeatureMap({"conf": 0.5}))
    keys = list(json.loads(encode(q)))
    assert keys[:3] == ["query_id", "session_id", "model_id"]
    assert keys[-1] == "meta"
    doc_keys = list(json.loads(encode(Document(4, vector=[1.0]))))
    assert doc_keys[0] == "id" and doc_keys[-1] == "namespace"


def test_encoding_is_one_line():
    line = encode(Document(4, vector=[1.0, 2.5], tokens=[1, 2], features={"a": 1.0}))
    assert "\n" not in line and " " not in line


@st.composite
def documents(draw, doc_id=None):
    vec = draw(st.one_of(st.none(), vectors))
    toks = draw(st.one_of(st.none(), st.lists(st.integers(0, 1000), max_size=5)))
    if vec is None and toks is None:
        toks = [1]
    return Document(
        draw(st.integers(0, 2**63 - 1)) if doc_id is None else doc_id,
        vector=vec,
        tokens=toks,
        payload_label=draw(st.one_of(st.none(), st.integers(0, 10), finite)),
        features=draw(features),
        namespace=draw(st.one_of(st.none(), names)),
    )


payloads = st.one_of(
    vectors.map(DenseVector),
    st.lists(st.tuples(st.integers(0, 50), finite), max_size=4).map(lambda t: TermSet(tuple(t))),
    st.integers(0, 20).map(TemplateId),
)


@given(documents())
def test_document_round_trip(doc):
    back = decode("document", encode(doc))
    assert back == doc
    if doc.vector is not None:
        assert back.vector.tobytes() == doc.vector.tobytes()


@given(names, names, names, payloads, st.integers(1, 50), st.one_of(st.none(), features))
def test_query_round_trip(qid, sid, mid, payload, k, meta):
    q = Query(qid, sid, mid, payload, k, meta)
    assert decode(Query, encode(q)) == q


@given(st.lists(finite, max_size=6), st.booleans())
def test_result_list_round_trip(scores, with_weights):
    ordered = sorted(enumerate(scores), key=lambda t: (-t[1], t[0]))
    items = tuple(_hit(i, s) for i, s in ordered)
    w = None
    if with_weights and items:
        w = np.full(len(items), 1.0 / len(items))
    rl = ResultList("q", items, w)
    back = decode("result_list", encode(rl))
    assert back == rl
    assert validate_result_list(back)


@given(st.one_of(vectors, st.lists(st.integers(0, 99), min_size=1, max_size=5).map(tuple)), finite, st.one_of(st.none(), names))
def test_example_round_trip(x, y, sid):
    ex = TrainingExample(x, y, sid)
    assert decode("example", encode(ex)) == ex


@given(st.sampled_from(["scalar", "per_doc", "grad"]), st.lists(finite, min_size=1, max_size=5))
def test_feedback_round_trip(kind, values):
    if kind == "scalar":
        fb = Feedback("q", "m", "scalar_utility_gain", values[0])
    elif kind == "per_doc":
        fb = Feedback("q", "m", "per_document_utility", values, tuple(range(len(values))))
    else:
        fb = Feedback("q", "m", "gradient", values)
    assert decode("feedback", encode(fb)) == fb


@given(st.lists(st.tuples(st.integers(0, 20), st.sampled_from([0.0, 0.5, 1.0, -1.0])), max_size=10, unique_by=lambda t: t[0]))
def test_ranking_order_is_idempotent(pairs):
    hits = [_hit(i, s) for i, s in pairs]
    once = sorted(hits, key=ranking_key)
    twice = sorted(once, key=ranking_key)
    assert [h.document.id for h in once] == [h.document.id for h in twice]
    assert validate_result_list(ResultList("q", tuple(once)))


def test_collection_view_respects_namespace():
    coll = Collection(1, [Document(1, vector=[1.0]), Document(2, vector=[1.0], namespace="A")])
    assert list(coll.view("A")[0]) == [1, 2]
    assert list(coll.view("B")[0]) == [1]
