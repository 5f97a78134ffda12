import json

import numpy as np
import pytest

from reml.access import InformationAccessModel
from reml.core import DimensionMismatch
from reml.models import AugmentedLinearModel, save_checkpoint
from reml.optim import (
    MetricsWriter,
    ModelEntry,
    MultiModelConfig,
    TrainerConfig,
    TrainingDiverged,
    combined_loss,
    per_example_losses,
    train,
    train_conditional,
    train_independent,
    train_joint,
    train_multi,
)
from reml.querygen import QueryStrategy
from reml.response import ResponseProcessor
from reml.retrieval import DenseRetriever, OracleRetriever
from reml.tasks import SyntheticTaskSpec, disjoint_subset_tasks, make_task


def neighbor_task(seed, k_true=3, n=400, corpus=100, d=8):
    return make_task(SyntheticTaskSpec("neighbor_regression", corpus, d, k_true, 0.05, seed, n))


def oracle_setup(task, p, k, seed, processor):
    a = InformationAccessModel(OracleRetriever(task.collection, task.relevance_map, p, seed), processor=processor, k=k)
    return AugmentedLinearModel.for_access(task.collection.dimension, [a]), [a]


def dense_setup(task, linear_query=False, k=1):
    d = task.collection.dimension
    strategy = QueryStrategy("linear", np.eye(d), k_default=k) if linear_query else QueryStrategy(k_default=k)
    a = InformationAccessModel(DenseRetriever(task.collection, projection=np.eye(d)), strategy, ResponseProcessor(append_label=True), k)
    return AugmentedLinearModel.for_access(d, [a], init_scale=0.1, seed=1), [a]


def params_bytes(model, access):
    theta, omega = model.parameters(access)
    return {k: v.tobytes() for k, v in {**theta, **omega}.items()}


def test_tau_schedule_geometric():
    cfg = TrainerConfig(tau_start=1.0, tau_end=0.01)
    assert cfg.tau(0, 3) == 1.0
    assert cfg.tau(1, 3) == pytest.approx(0.1, rel=1e-12)
    assert cfg.tau(2, 3) == pytest.approx(0.01, rel=1e-12)
    assert cfg.tau(0, 1) == 1.0


def test_config_validation():
    for bad in ({"regime": "greedy"}, {"learning_rate": -1}, {"epochs": 0}, {"momentum": 1.0}, {"tau_end": 0.0}):
        with pytest.raises(ValueError):
            TrainerConfig(**bad)


def test_zero_learning_rate_leaves_theta():
    task = neighbor_task(0)
    m, acc = dense_setup(task)
    before = params_bytes(m, acc)
    train_independent(m, acc, task.train, TrainerConfig(learning_rate=0.0, epochs=2))
    assert params_bytes(m, acc) == before


def test_oracle_fit_reduces_train_mse_tenfold():
    task = neighbor_task(1)
    m, acc = oracle_setup(task, 0.0, 3, 1, ResponseProcessor("concat_topk", 3, True))
    initial = per_example_losses(m, acc, task.train).mean()
    train_independent(m, acc, task.train, TrainerConfig(learning_rate=0.1, epochs=30), val=task.val)
    assert per_example_losses(m, acc, task.train).mean() < 0.1 * initial


def test_scrambled_oracle_is_worse():
    clean, scrambled = [], []
    for seed in range(10):
        task = neighbor_task(seed, k_true=1, n=300)
        cfg = TrainerConfig(learning_rate=0.1, epochs=15, seed=seed)
        for p, out in ((0.0, clean), (1.0, scrambled)):
            m, acc = oracle_setup(task, p, 2, seed, ResponseProcessor(append_label=True))
            out.append(train_independent(m, acc, task.train, cfg, val=task.val).best_val_loss)
    assert np.median(scrambled) > np.median(clean)


def test_best_checkpoint_restored_and_no_worse_than_initial():
    task = neighbor_task(2)
    m, acc = dense_setup(task)
    initial = per_example_losses(m, acc, task.val).mean()
    res = train_independent(m, acc, task.train, TrainerConfig(learning_rate=0.05, epochs=5), val=task.val)
    final = per_example_losses(m, acc, task.val).mean()
    assert res.best_val_loss <= initial
    assert final == res.best_val_loss == min([initial, *res.val_losses])


def test_best_so_far_is_monotone_with_patience():
    task = neighbor_task(3)
    m, acc = dense_setup(task)
    res = train_conditional(m, acc, task.train, TrainerConfig("conditional", 0.5, conditional_rounds=6, patience=2), val=task.val)
    best = np.minimum.accumulate(res.val_losses)
    assert np.all(np.diff(best) <= 1e-6)


def test_conditional_skip_equals_independent():
    task = neighbor_task(4)
    m1, a1 = dense_setup(task)
    m2, a2 = dense_setup(task)
    train_conditional(m1, a1, task.train, TrainerConfig("conditional", conditional_rounds=1, skip_retriever_step=True, seed=7))
    train_independent(m2, a2, task.train, TrainerConfig(epochs=1, seed=7))
    assert params_bytes(m1, a1) == params_bytes(m2, a2)


def test_conditional_moves_retriever_only_in_retrieval_step():
    task = neighbor_task(5)
    m, acc = dense_setup(task)
    M0 = acc[0].retriever.projection.copy()
    train_conditional(m, acc, task.train, TrainerConfig("conditional", conditional_rounds=1))
    assert not np.array_equal(M0, acc[0].retriever.projection)


def test_joint_with_frozen_retrieval_equals_soft_independent():
    task = neighbor_task(6)
    m1, a1 = dense_setup(task, linear_query=True)
    m2, a2 = dense_setup(task, linear_query=True)
    frozen = frozenset({"a0.M", "a0.W_q"})
    train_joint(m1, a1, task.train, TrainerConfig("joint", epochs=3, seed=5, freeze=frozen))
    train_independent(m2, a2, task.train, TrainerConfig(epochs=3, seed=5, freeze=frozen), soft=True)
    assert params_bytes(m1, a1) == params_bytes(m2, a2)
    np.testing.assert_array_equal(a1[0].retriever.projection, np.eye(8))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_reports_last_finite_loss():
    task = neighbor_task(7)
    m, acc = dense_setup(task)
    with pytest.raises(TrainingDiverged) as info:
        train_joint(m, acc, task.train, TrainerConfig("joint", learning_rate=1e40, epochs=3))
    assert info.value.last_finite_loss is not None
    assert "last finite loss" in str(info.value)


def test_metrics_stream(tmp_path):
    task = neighbor_task(8)
    m, acc = dense_setup(task)
    w = MetricsWriter(tmp_path / "metrics.jsonl")
    train(m, acc, task.train, TrainerConfig("joint", epochs=2), val=task.val, metrics=w)
    w.close()
    rows = [json.loads(l) for l in (tmp_path / "metrics.jsonl").read_text().splitlines()]
    assert [(r["epoch"], r["split"]) for r in rows] == [(0, "train"), (0, "val"), (1, "train"), (1, "val")]
    assert all(set(r) == {"epoch", "split", "loss", "utility_gain_mean"} for r in rows)
    assert rows[0]["utility_gain_mean"] is None and isinstance(rows[1]["utility_gain_mean"], float)


@pytest.mark.parametrize("regime", ["independent", "conditional", "joint"])
def test_trainers_bit_reproducible(regime, tmp_path):
    outs = []
    for run in range(2):
        task = neighbor_task(9)
        m, acc = dense_setup(task, linear_query=True)
        w = MetricsWriter(tmp_path / f"m{run}.jsonl")
        train(m, acc, task.train, TrainerConfig(regime, epochs=2, conditional_rounds=2, seed=3, momentum=0.9), val=task.val, metrics=w)
        w.close()
        save_checkpoint(tmp_path / f"c{run}.json", m, acc)
        outs.append(((tmp_path / f"m{run}.jsonl").read_bytes(), (tmp_path / f"c{run}.json").read_bytes()))
    assert outs[0] == outs[1]


def _multi(seed, alphas, personalize=False, lr=0.1):
    coll, tasks = disjoint_subset_tasks(seed, n_examples=200)
    a = InformationAccessModel(DenseRetriever(coll, projection=np.eye(8)), processor=ResponseProcessor(append_label=True), k=1)
    entries = [
        ModelEntry(AugmentedLinearModel.for_access(8, [a], model_id=f"m{i}", init_scale=0.1, seed=i), t.train, alpha, [a])
        for i, (t, alpha) in enumerate(zip(tasks, alphas))
    ]
    return MultiModelConfig(entries, personalize), a, tasks


def test_one_hot_alpha_matches_single_model_joint():
    cfg, a, tasks = _multi(0, (0.0, 1.0))
    other_before = params_bytes(cfg.entries[0].model, [])
    train_multi(cfg, TrainerConfig("joint", 0.1, 3, 32, seed=4))
    coll, tasks2 = disjoint_subset_tasks(0, n_examples=200)
    a2 = InformationAccessModel(DenseRetriever(coll, projection=np.eye(8)), processor=ResponseProcessor(append_label=True), k=1)
    single = AugmentedLinearModel.for_access(8, [a2], model_id="m1", init_scale=0.1, seed=1)
    train_joint(single, [a2], tasks2[1].train, TrainerConfig("joint", 0.1, 3, 32, seed=4))
    assert params_bytes(cfg.entries[1].model, [a]) == params_bytes(single, [a2])
    assert params_bytes(cfg.entries[0].model, []) == other_before


def test_alpha_scale_absorbed_by_learning_rate():
    c1, a1, _ = _multi(1, (1.0, 0.5))
    c2, a2, _ = _multi(1, (4.0, 2.0))
    train_multi(c1, TrainerConfig("joint", 0.1, 2, 32, seed=2))
    train_multi(c2, TrainerConfig("joint", 0.025, 2, 32, seed=2))
    for e1, e2 in zip(c1.entries, c2.entries):
        assert params_bytes(e1.model, [a1]) == params_bytes(e2.model, [a2])


def test_multi_rejects_incompatible_model():
    cfg, a, tasks = _multi(2, (1.0, 1.0))
    cfg.entries[1].model = AugmentedLinearModel(8, (3,), model_id="odd")
    with pytest.raises(DimensionMismatch, match="odd"):
        train_multi(cfg, TrainerConfig("joint"))


def test_multi_config_validation():
    cfg, a, tasks = _multi(3, (1.0, 1.0))
    with pytest.raises(ValueError):
        MultiModelConfig([ModelEntry(e.model, e.data, 0.0, e.access) for e in cfg.entries])
    with pytest.raises(ValueError):
        MultiModelConfig([ModelEntry(cfg.entries[0].model, cfg.entries[0].data, -1.0)])


def test_personalization_lowers_combined_loss():
    results = {False: [], True: []}
    for seed in range(10):
        for pers in (False, True):
            cfg, a, tasks = _multi(seed, (1.0, 1.0), pers)
            cfg = MultiModelConfig([ModelEntry(e.model, t.train, 1.0, [a]) for e, t in zip(cfg.entries, tasks)], pers)
            train_multi(cfg, TrainerConfig("joint", 0.1, 20, 32, seed))
            test = MultiModelConfig([ModelEntry(e.model, t.test, 1.0, [a]) for e, t in zip(cfg.entries, tasks)])
            results[pers].append(combined_loss(test))
    assert np.median(results[True]) < np.median(results[False])
