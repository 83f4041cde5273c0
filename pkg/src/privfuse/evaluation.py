"""Downstream utility and attribute-inference evaluation.

Classifiers are implemented here (CART with Gini impurity, batch
gradient-descent logistic regression) so results depend only on numpy and
the split seeds.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .embeddings import EmbeddingTable
from .graph import LabelSplit


@dataclass(frozen=True)
class TreeConfig:
    max_depth: int | None = 10
    min_leaf: int = 2
    criterion: str = "gini"

    def __post_init__(self):
        if self.max_depth is not None and self.max_depth < 1:
            raise ValueError("max_depth must be positive (or None for unbounded)")
        if self.min_leaf < 1:
            raise ValueError("min_leaf must be positive")
        if self.criterion != "gini":
            raise ValueError("only the Gini criterion is supported")


@dataclass(frozen=True)
class LogRegConfig:
    learning_rate: float = 0.5
    epochs: int = 500
    l2: float = 1e-3

    def __post_init__(self):
        if not (self.learning_rate > 0 and self.epochs > 0 and self.l2 >= 0):
            raise ValueError("learning_rate and epochs must be positive, l2 non-negative")


# ---------------------------------------------------------------------------
# CART


def _gini_from_counts(counts: np.ndarray) -> np.ndarray:
    n = counts.sum(axis=-1)
    safe = np.where(n > 0, n, 1)
    return 1.0 - ((counts / safe[..., None]) ** 2).sum(axis=-1)


class DecisionTree:
    """Binary-split CART classifier over integer class labels."""

    def __init__(self, cfg: TreeConfig = TreeConfig()):
        self.cfg = cfg
        # node arrays: feature (-1 for leaves), threshold, left, right, label
        self._nodes: list[list] = []

    def fit(self, X: np.ndarray, y: np.ndarray) -> "DecisionTree":
        X = np.asarray(X, dtype=float)
        y = np.asarray(y, dtype=np.int64)
        if len(X) == 0:
            raise ValueError("cannot fit a tree on zero samples")
        self.classes_ = np.unique(y)
        codes = np.searchsorted(self.classes_, y)
        self._onehot = np.eye(len(self.classes_))[codes]
        self._X = X
        self._nodes = []
        self._grow(np.arange(len(X)), 0)
        del self._X, self._onehot
        return self

    def _leaf(self, idx):
        counts = self._onehot[idx].sum(axis=0)
        self._nodes.append([-1, 0.0, -1, -1, int(self.classes_[int(np.argmax(counts))])])
        return len(self._nodes) - 1

    def _best_split(self, idx):
        X, Y = self._X[idx], self._onehot[idx]
        n = len(idx)
        leaf = self.cfg.min_leaf
        order = np.argsort(X, axis=0, kind="stable")
        Xs = np.take_along_axis(X, order, axis=0)
        left = np.cumsum(Y[order], axis=0)[:-1]  # (n-1, d, c): left side holds i+1 samples
        total = Y.sum(axis=0)
        right = total - left
        nl = np.arange(1, n)[:, None]
        score = (nl * _gini_from_counts(left) + (n - nl) * _gini_from_counts(right)) / n
        valid = (Xs[1:] > Xs[:-1]) & (nl >= leaf) & (n - nl >= leaf)
        if not valid.any():
            return None
        score = np.where(valid, score, np.inf)
        # first minimum in (feature, position) order
        flat = np.argmin(score.T.ravel())
        f, i = divmod(int(flat), n - 1)
        return f, 0.5 * (Xs[i, f] + Xs[i + 1, f])

    def _grow(self, idx, depth):
        counts = self._onehot[idx].sum(axis=0)
        pure = np.count_nonzero(counts) <= 1
        deep = self.cfg.max_depth is not None and depth >= self.cfg.max_depth
        if pure or deep or len(idx) < 2 * self.cfg.min_leaf:
            return self._leaf(idx)
        split = self._best_split(idx)
        if split is None:
            return self._leaf(idx)
        f, thr = split
        node = len(self._nodes)
        self._nodes.append([f, thr, -1, -1, 0])
        go_left = self._X[idx, f] <= thr
        self._nodes[node][2] = self._grow(idx[go_left], depth + 1)
        self._nodes[node][3] = self._grow(idx[~go_left], depth + 1)
        return node

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        nodes = self._nodes
        out = np.empty(len(X), dtype=np.int64)
        for r, x in enumerate(X):
            j = 0
            while nodes[j][0] >= 0:
                j = nodes[j][2] if x[nodes[j][0]] <= nodes[j][1] else nodes[j][3]
            out[r] = nodes[j][4]
        return out

    @property
    def n_nodes(self) -> int:
        return len(self._nodes)


# ---------------------------------------------------------------------------
# logistic regression


def logreg_loss_and_grad(w: np.ndarray, b: float, X: np.ndarray, y: np.ndarray, l2: float):
    """Mean binary cross-entropy plus ``l2/2 * |w|^2``; returns (loss, dw, db)."""
    s = X @ w + b
    loss = np.mean(np.logaddexp(0.0, s) - y * s) + 0.5 * l2 * float(w @ w)
    r = (0.5 * (1.0 + np.tanh(0.5 * s)) - y) / len(y)
    return float(loss), X.T @ r + l2 * w, float(r.sum())


class LogisticRegression:
    def __init__(self, cfg: LogRegConfig = LogRegConfig()):
        self.cfg = cfg

    def fit(self, X, y) -> "LogisticRegression":
        X = np.asarray(X, dtype=float)
        y = np.asarray(y, dtype=np.int64)
        self.classes_ = np.unique(y)
        if len(self.classes_) > 2:
            raise ValueError("logistic regression here is binary only")
        self.mu_ = X.mean(axis=0)
        sd = X.std(axis=0)
        self.sd_ = np.where(sd > 0, sd, 1.0)
        self.w_ = np.zeros(X.shape[1])
        self.b_ = 0.0
        if len(self.classes_) < 2:
            return self
        Xs = (X - self.mu_) / self.sd_
        t = (y == self.classes_[1]).astype(float)
        for _ in range(self.cfg.epochs):
            _, dw, db = logreg_loss_and_grad(self.w_, self.b_, Xs, t, self.cfg.l2)
            self.w_ -= self.cfg.learning_rate * dw
            self.b_ -= self.cfg.learning_rate * db
        return self

    def predict(self, X) -> np.ndarray:
        if len(self.classes_) < 2:
            return np.full(len(X), self.classes_[0])
        s = ((np.asarray(X, dtype=float) - self.mu_) / self.sd_) @ self.w_ + self.b_
        return np.where(s > 0, self.classes_[1], self.classes_[0])


# ---------------------------------------------------------------------------
# metrics


def micro_scores(predicted: Sequence, truth: Sequence) -> tuple[float, float]:
    """Micro precision and micro-F1 over all (user, label) decisions.

    Precision is 0 when nothing is predicted.
    """
    if len(predicted) != len(truth):
        raise ValueError("predicted and truth must cover the same users")
    tp = fp = fn = 0
    for p, t in zip(predicted, truth):
        p, t = set(p), set(t)
        tp += len(p & t)
        fp += len(p - t)
        fn += len(t - p)
    precision = tp / (tp + fp) if tp + fp else 0.0
    f1 = 2 * tp / (2 * tp + fp + fn) if tp + fp + fn else 1.0
    return precision, f1


def micro_f1(predicted: Sequence, truth: Sequence) -> float:
    return micro_scores(predicted, truth)[1]


@dataclass
class EvalReport:
    task: str
    values: dict[str, list[float]]
    seeds: list[int]
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.seeds:
            raise ValueError("a report needs at least one repeat")
        for k, v in self.values.items():
            if len(v) != len(self.seeds):
                raise ValueError(f"metric {k} has {len(v)} values for {len(self.seeds)} repeats")

    @property
    def repeats(self) -> int:
        return len(self.seeds)

    def mean(self, metric: str) -> float:
        return float(np.mean(self.values[metric]))

    def std(self, metric: str) -> float:
        return float(np.std(self.values[metric]))

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "repeats": self.repeats,
            "seeds": list(self.seeds),
            "metrics": {
                k: {"mean": self.mean(k), "std": self.std(k), "values": [float(x) for x in v]}
                for k, v in self.values.items()
            },
            "config": self.config,
        }

    def save(self, path: str | Path, provenance: Mapping | None = None) -> None:
        doc = self.to_dict()
        if provenance:
            doc["provenance"] = dict(provenance)
        Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_plot_csv(path: str | Path, rows: Sequence[Mapping], header: Mapping | None = None) -> None:
    """Rows with keys ``epsilon, task, metric, mean, std``; ``header`` becomes a leading ``#`` line."""
    cols = ["epsilon", "task", "metric", "mean", "std"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if header:
            fh.write("# " + json.dumps(dict(header), sort_keys=True) + "\n")
        w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({c: r[c] for c in cols})


# ---------------------------------------------------------------------------
# tasks


def _as_splits(split) -> list[LabelSplit]:
    return [split] if isinstance(split, LabelSplit) else list(split)


def predict_interests(
    emb: EmbeddingTable,
    labels: Mapping[str, Sequence[int]],
    split: LabelSplit | Sequence[LabelSplit],
    cfg: TreeConfig = TreeConfig(),
    n_labels: int | None = None,
) -> EvalReport:
    """Binary-relevance trees, one per interest category."""
    splits = _as_splits(split)
    if n_labels is None:
        n_labels = 1 + max((max(v) for v in labels.values() if len(v)), default=0)
    prec, f1 = [], []
    for s in splits:
        Xtr, Xte = emb.rows(s.train), emb.rows(s.test)
        Ytr = np.zeros((len(s.train), n_labels), dtype=np.int64)
        for r, u in enumerate(s.train):
            Ytr[r, list(labels[u])] = 1
        pred = [set() for _ in s.test]
        for c in range(n_labels):
            if Ytr[:, c].sum() == 0:
                warnings.warn(f"interest {c} has no positive training example; always predicted negative", stacklevel=2)
                continue
            out = DecisionTree(cfg).fit(Xtr, Ytr[:, c]).predict(Xte)
            for r in np.flatnonzero(out == 1):
                pred[r].add(c)
        p, f = micro_scores(pred, [set(labels[u]) for u in s.test])
        prec.append(p)
        f1.append(f)
    return EvalReport("interests", {"precision": prec, "micro_f1": f1}, [s.seed for s in splits], asdict(cfg))


def _single_label_attack(task, emb, sensitive, splits, make_clf, cfg):
    prec, f1 = [], []
    for s in splits:
        tr = [u for u in s.train if sensitive.get(u, -1) >= 0]
        te = [u for u in s.test if sensitive.get(u, -1) >= 0]
        if not tr or not te:
            raise ValueError(f"{task}: no labelled users in the train or test split")
        ytr = np.array([sensitive[u] for u in tr])
        if len(np.unique(ytr)) < 2:
            warnings.warn(f"{task}: single-class training data, predicting the majority class", stacklevel=3)
        pred = make_clf().fit(emb.rows(tr), ytr).predict(emb.rows(te))
        p, f = micro_scores([{int(x)} for x in pred], [{sensitive[u]} for u in te])
        prec.append(p)
        f1.append(f)
    return EvalReport(task, {"precision": prec, "micro_f1": f1}, [s.seed for s in splits], asdict(cfg))


def attack_gender(emb, sensitive: Mapping[str, int], split, cfg: LogRegConfig = LogRegConfig()) -> EvalReport:
    """Logistic-regression attacker; ``sensitive`` maps user id to 0/1 (-1 = unknown)."""
    return _single_label_attack("gender", emb, sensitive, _as_splits(split), lambda: LogisticRegression(cfg), cfg)


def attack_occupation(emb, sensitive: Mapping[str, int], split, cfg: TreeConfig = TreeConfig()) -> EvalReport:
    return _single_label_attack("occupation", emb, sensitive, _as_splits(split), lambda: DecisionTree(cfg), cfg)
