import csv
import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from privfuse.embeddings import EmbeddingTable
from privfuse.evaluation import (
    DecisionTree,
    EvalReport,
    LogisticRegression,
    LogRegConfig,
    TreeConfig,
    attack_gender,
    attack_occupation,
    logreg_loss_and_grad,
    micro_f1,
    micro_scores,
    predict_interests,
    write_plot_csv,
)
from privfuse.graph import split_ids
from privfuse.rng import substream
from privfuse.verify import numeric_grad, rel_error

SEEDS = range(5)


def ids(n):
    return [f"u{i:04d}" for i in range(n)]


def splits(n, seeds=SEEDS):
    return [split_ids(ids(n), 0.8, s) for s in seeds]


def test_micro_f1_examples():
    assert micro_f1([{1}, {2, 3}], [{1}, {2, 3}]) == 1.0
    p, f = micro_scores([{1}, {1, 2}], [{1, 2}, {2}])
    assert f == pytest.approx(4 / 6) and p == pytest.approx(2 / 3)
    assert micro_scores([set(), set()], [{1}, {2}]) == (0.0, 0.0)


def test_micro_scores_length_mismatch():
    with pytest.raises(ValueError):
        micro_scores([{1}], [])


@given(st.lists(st.tuples(st.sets(st.integers(0, 5)), st.sets(st.integers(0, 5))), min_size=1, max_size=20))
def test_metrics_in_unit_interval(rows):
    p, f = micro_scores([a for a, _ in rows], [b for _, b in rows])
    assert 0.0 <= p <= 1.0 and 0.0 <= f <= 1.0


def test_one_hot_interests_are_perfect():
    n = 100
    rng = substream(0, "onehot")
    lab = rng.integers(0, 4, n)
    emb = EmbeddingTable(tuple(ids(n)), np.eye(4)[lab])
    labels = {u: (int(c),) for u, c in zip(ids(n), lab)}
    r = predict_interests(emb, labels, splits(n), n_labels=4)
    assert r.mean("precision") == 1.0 and r.mean("micro_f1") == 1.0
    assert r.std("precision") == 0.0


def test_random_embeddings_interest_band():
    n = 400
    rng = substream(1, "random-interests")
    emb = EmbeddingTable(tuple(ids(n)), rng.standard_normal((n, 8)))
    labels = {u: (int(c),) for u, c in zip(ids(n), rng.integers(0, 2, n))}
    r = predict_interests(emb, labels, splits(n), n_labels=2)
    assert 0.3 <= r.mean("micro_f1") <= 0.7


def test_interest_report_is_deterministic():
    n = 80
    rng = substream(2, "det")
    emb = EmbeddingTable(tuple(ids(n)), rng.standard_normal((n, 4)))
    labels = {u: tuple(sorted({int(a), int(b)})) for u, a, b in zip(ids(n), rng.integers(0, 3, n), rng.integers(0, 3, n))}
    a = predict_interests(emb, labels, splits(n))
    b = predict_interests(emb, labels, splits(n))
    assert a.to_dict() == b.to_dict()


def test_category_without_positives_warns():
    n = 20
    emb = EmbeddingTable(tuple(ids(n)), np.arange(n, dtype=float)[:, None])
    labels = {u: (0,) for u in ids(n)}
    with pytest.warns(UserWarning, match="interest 1"):
        r = predict_interests(emb, labels, splits(n, [0]), n_labels=2)
    assert r.mean("precision") == 1.0


def test_gender_chance_level():
    n = 1000
    rng = substream(3, "gender-chance")
    emb = EmbeddingTable(tuple(ids(n)), rng.standard_normal((n, 8)))
    g = rng.integers(0, 2, n)
    majority = max(g.mean(), 1 - g.mean())
    r = attack_gender(emb, dict(zip(ids(n), g.tolist())), splits(n))
    assert abs(r.mean("precision") - majority) <= 0.05


def test_gender_explicit_coordinate():
    n = 300
    rng = substream(4, "gender-coord")
    g = rng.integers(0, 2, n)
    emb = EmbeddingTable(tuple(ids(n)), np.column_stack([g, rng.standard_normal((n, 5))]))
    r = attack_gender(emb, dict(zip(ids(n), g.tolist())), splits(n))
    assert r.mean("precision") >= 0.99


def test_unknown_sensitive_values_are_skipped():
    n = 50
    g = np.array([i % 2 for i in range(n)])
    emb = EmbeddingTable(tuple(ids(n)), g[:, None].astype(float))
    sens = {u: (-1 if i < 10 else int(v)) for i, (u, v) in enumerate(zip(ids(n), g))}
    assert attack_gender(emb, sens, splits(n, [0])).mean("precision") == 1.0


def test_single_class_training_warns():
    n = 20
    emb = EmbeddingTable(tuple(ids(n)), np.zeros((n, 2)))
    with pytest.warns(UserWarning, match="single-class"):
        r = attack_gender(emb, {u: 1 for u in ids(n)}, splits(n, [0]))
    assert r.mean("precision") == 1.0


def test_occupation_one_hot_and_chance():
    n, c = 1000, 4
    rng = substream(5, "occupation")
    occ = rng.integers(0, c, n)
    sens = dict(zip(ids(n), occ.tolist()))
    onehot = EmbeddingTable(tuple(ids(n)), np.eye(c)[occ])
    assert attack_occupation(onehot, sens, splits(n)).mean("precision") == 1.0
    noise = EmbeddingTable(tuple(ids(n)), rng.standard_normal((n, 6)))
    r = attack_occupation(noise, sens, splits(n))
    assert abs(r.mean("precision") - 1 / c) <= 0.05
    assert r.to_dict() == attack_occupation(noise, sens, splits(n)).to_dict()


@given(st.integers(2, 60), st.integers(1, 4), st.integers(2, 4), st.integers(0, 1000))
def test_unbounded_tree_memorizes(n, d, c, seed):
    rng = substream(seed, "memorize")
    X = rng.standard_normal((n, d))
    y = rng.integers(0, c, n)
    tree = DecisionTree(TreeConfig(max_depth=None, min_leaf=1)).fit(X, y)
    assert micro_f1([{int(v)} for v in tree.predict(X)], [{int(v)} for v in y]) == 1.0


def test_tree_depth_limit():
    X = np.arange(64, dtype=float)[:, None]
    y = np.arange(64) % 2
    assert DecisionTree(TreeConfig(max_depth=1, min_leaf=1)).fit(X, y).n_nodes <= 3


@pytest.mark.parametrize("seed", range(3))
def test_logreg_gradient(seed):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((30, 4))
    y = rng.integers(0, 2, 30).astype(float)
    arrays = {"w": rng.standard_normal(4), "b": np.array([0.3])}
    _, dw, db = logreg_loss_and_grad(arrays["w"], float(arrays["b"][0]), X, y, 0.1)
    num = numeric_grad(lambda: logreg_loss_and_grad(arrays["w"], float(arrays["b"][0]), X, y, 0.1)[0], arrays)
    assert rel_error(num["w"], dw) <= 1e-5
    assert rel_error(num["b"], np.array([db])) <= 1e-5


def test_logreg_rejects_multiclass():
    with pytest.raises(ValueError):
        LogisticRegression().fit(np.zeros((3, 1)), [0, 1, 2])


@pytest.mark.parametrize("kw", [{"max_depth": 0}, {"min_leaf": 0}, {"criterion": "entropy"}])
def test_tree_config_validates(kw):
    with pytest.raises(ValueError):
        TreeConfig(**kw)


def test_logreg_config_validates():
    with pytest.raises(ValueError):
        LogRegConfig(learning_rate=0)


def test_report_round_trip(tmp_path):
    r = EvalReport("t", {"precision": [0.5, 0.5]}, [0, 1])
    assert r.std("precision") == 0.0
    r.save(tmp_path / "r.json", {"tool": "x"})
    doc = json.loads((tmp_path / "r.json").read_text())
    assert doc["metrics"]["precision"]["mean"] == 0.5 and doc["provenance"] == {"tool": "x"}
    with pytest.raises(ValueError):
        EvalReport("t", {"precision": [0.5]}, [0, 1])


def test_plot_csv(tmp_path):
    rows = [{"epsilon": e, "task": "interests", "metric": "precision", "mean": 0.5, "std": 0.0} for e in (1, 5)]
    write_plot_csv(tmp_path / "p.csv", rows)
    got = list(csv.DictReader(open(tmp_path / "p.csv")))
    assert [r["epsilon"] for r in got] == ["1", "5"]
