from dataclasses import replace

import numpy as np
import pytest

from relgraph.metrics import bce_loss, compute_metrics
from relgraph.optim import RngStream
from relgraph.pipeline import PretrainConfig, RetrievalConfig, dataset_from_benchmark
from relgraph.synth import SynthConfig, gen_synthetic
from relgraph import train as tr
from relgraph.train import (ABLATIONS, TrainConfig, TrainingDiverged, ablate, batch_loss_and_grads,
                            evaluate, init_model, predict_probabilities, train)

from helpers import tiny_config, tiny_data


def quick(**kw) -> TrainConfig:
    return TrainConfig(**{"max_epochs": 3, "patience": 100, **kw})


@pytest.fixture(scope="module")
def toy20():
    """Twenty training questions on a twelve-entity world."""
    out = {}
    for seed in range(5):
        bench = gen_synthetic(SynthConfig(entities=12, relations=3, triples=40, documents=20,
                                          train=20, valid=5, test=5, doc_only_fraction=0.2,
                                          seed=seed))
        out[seed] = dataset_from_benchmark(bench, tiny_config(), RetrievalConfig(budget=12),
                                           PretrainConfig(transe_epochs=20, word_dim=4), seed)
    return out


def test_defaults():
    tc = TrainConfig()
    assert (tc.batch_size, tc.max_epochs, tc.lr, tc.patience) == (10, 100, 0.001, 10)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(patience=0)


@pytest.mark.parametrize("seed", range(5))
def test_loss_at_best_epoch_below_initial(toy20, seed):
    data = toy20[seed]
    tc = quick(max_epochs=15, lr=0.01, seed=seed)
    result = train(data, tiny_config(), tc)
    start = init_model(tiny_config(), data, tc.seed)

    def train_loss(model):
        probs = predict_probabilities(model, data.splits["train"], data.vocab)
        return np.mean([bce_loss(p, i.labels) for p, i in zip(probs, data.splits["train"])])

    assert train_loss(result.model) < train_loss(start)


def test_patience_one_never_improving_stops_after_two_epochs():
    _, data = tiny_data(0)
    result = train(data, tiny_config(), TrainConfig(patience=1), validate=lambda m: 0.0)
    assert len(result.log) == 2 and result.best_epoch == 0


def test_schedule_in_log():
    _, data = tiny_data(1)
    result = train(data, tiny_config(), quick(max_epochs=30), validate=lambda m: 0.0)
    shown = [e.line().split("\t")[1] for e in result.log]
    assert shown == ["0.001"] * 10 + ["0.0008"] * 10 + ["0.00064"] * 10
    np.testing.assert_allclose([e.lr for e in result.log], [float(x) for x in shown],
                               rtol=1e-12, atol=0)


def test_log_line_format():
    e = tr.EpochLog(3, 0.0008, 0.25, 41.5)
    assert e.line().split("\t") == ["3", "0.0008", "0.250000", "41.5000"]


def test_early_stopping_returns_best_parameters(toy20):
    data = toy20[0]
    tc = quick(max_epochs=8, lr=0.01)
    result = train(data, tiny_config(), tc)
    valid = data.splits["valid"]
    again = evaluate(result.model, valid, data.vocab).f1_avg
    assert again == pytest.approx(result.best_val, abs=1e-9)
    assert result.best_val == max(e.val_f1_avg for e in result.log)


def test_training_is_deterministic(toy20):
    a = train(toy20[1], tiny_config(), quick(seed=4))
    b = train(toy20[1], tiny_config(), quick(seed=4))
    assert [e.line() for e in a.log] == [e.line() for e in b.log]
    for k in a.model.params:
        np.testing.assert_array_equal(a.model.params[k], b.model.params[k])


def test_divergence_is_reported(monkeypatch):
    _, data = tiny_data(0)
    monkeypatch.setattr(tr, "batch_loss_and_grads", lambda *a, **k: (float("nan"), {}))
    with pytest.raises(TrainingDiverged, match="epoch 0 batch 0"):
        train(data, tiny_config(), quick())


def test_empty_splits_rejected():
    _, data = tiny_data(0)
    with pytest.raises(ValueError):
        train(replace(data, splits={"train": data.splits["train"]}), tiny_config(), quick())


def test_batch_gradient_is_mean_of_question_gradients():
    _, data = tiny_data(2)
    config = tiny_config(dropout=0.0, batch_norm=False)
    model = init_model(config, data, 0)
    batch = data.splits["train"][:3]
    loss, grads = batch_loss_and_grads(model, batch, data.vocab, RngStream(0))
    parts = [batch_loss_and_grads(model, [inst], data.vocab, RngStream(0)) for inst in batch]
    assert loss == pytest.approx(np.mean([p[0] for p in parts]), abs=1e-12)
    for k in grads:
        np.testing.assert_allclose(grads[k], np.mean([p[1][k] for p in parts], axis=0),
                                   rtol=0, atol=1e-12)


def test_evaluate_invariant_to_question_and_node_order(toy20):
    data = toy20[2]
    model = init_model(tiny_config(), data, 0)
    test = data.splits["test"]
    base = evaluate(model, test, data.vocab, threshold=0.5)
    assert evaluate(model, test[::-1], data.vocab, threshold=0.5) == base
    probs = predict_probabilities(model, test, data.vocab)
    perm = [np.random.default_rng(k).permutation(len(p)) for k, p in enumerate(probs)]
    shuffled = compute_metrics([p[o] for p, o in zip(probs, perm)],
                               [i.labels[o] for i, o in zip(test, perm)],
                               [i.entity_ids[o] for i, o in zip(test, perm)], 0.5)
    assert shuffled == base


def test_threads_agree_with_serial(toy20):
    data = toy20[3]
    model = init_model(tiny_config(), data, 0)
    serial = predict_probabilities(model, data.splits["test"], data.vocab, threads=1)
    pooled = predict_probabilities(model, data.splits["test"], data.vocab, threads=3)
    for a, b in zip(serial, pooled):
        np.testing.assert_array_equal(a, b)


def test_hits_is_threshold_independent(toy20):
    data = toy20[4]
    model = init_model(tiny_config(), data, 0)
    hits = {evaluate(model, data.splits["test"], data.vocab, threshold=t).hits_at_1
            for t in (0.05, 0.3, 0.5, 0.95)}
    assert len(hits) == 1


def test_ablation_table_layout():
    _, data = tiny_data(3)
    report = ablate(data, tiny_config(), quick(max_epochs=1), seeds=[0, 1])
    lines = report.table().splitlines()
    assert len(lines) == 5
    assert lines[0].split()[-4:] == ["F1_micro", "F1_macro", "F1_avg", "Hits@1"]
    assert [r[0] for r in report.rows] == [name for name, _ in ABLATIONS]
    assert all(len(v) == 2 for v in report.per_seed.values())
    for name, m in report.rows:
        runs = np.array([x.as_row() for x in report.per_seed[name]])
        np.testing.assert_allclose(m.as_row(), runs.mean(axis=0))
