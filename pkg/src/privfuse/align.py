"""Unsupervised cross-network user alignment.

A linear map ``W`` (source -> target space) is trained adversarially against
a one-hidden-layer discriminator. After every generator step ``W`` is pulled
back toward the orthogonal group with ``W <- (1+b) W - b (W W^T) W``.
Anchors are mutual nearest neighbours under CSLS.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .embeddings import EmbeddingTable
from .rng import substream


@dataclass(frozen=True)
class GanConfig:
    hidden: int = 512
    input_noise: float = 0.0
    label_smoothing: float = 0.0
    epochs: int = 5
    iterations: int = 400
    batch_size: int = 32
    dis_steps: int = 5
    lr_gen: float = 0.01
    lr_dis: float = 0.1
    beta: float = 0.01
    leaky: float = 0.2
    init: str = "moments"
    seed: int = 0

    def __post_init__(self):
        for name in ("hidden", "epochs", "iterations", "batch_size", "dis_steps"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not (self.lr_gen > 0 and self.lr_dis > 0):
            raise ValueError("learning rates must be positive")
        if not 0.0 <= self.beta <= 0.01:
            raise ValueError("orthogonalization strength beta must lie in [0, 0.01]")
        if self.init not in ("moments", "identity"):
            raise ValueError(f"unknown init {self.init!r}")


@dataclass
class AlignmentModel:
    W: np.ndarray
    history: list[dict] = field(default_factory=list)

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=float)
        if self.W.ndim != 2 or self.W.shape[0] != self.W.shape[1]:
            raise ValueError("mapping must be a square matrix")
        if not np.all(np.isfinite(self.W)):
            raise ValueError("mapping has non-finite entries")

    def map(self, Z: np.ndarray) -> np.ndarray:
        return np.asarray(Z, dtype=float) @ self.W.T

    def orthogonality_error(self) -> float:
        return float(np.linalg.norm(self.W.T @ self.W - np.eye(len(self.W))))


def normalize_rows(X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    norms = np.linalg.norm(X, axis=1, keepdims=True)
    return np.divide(X, norms, out=np.zeros_like(X), where=norms > 0)


def orthogonalize(W: np.ndarray, beta: float) -> np.ndarray:
    return (1.0 + beta) * W - beta * (W @ W.T) @ W


def moment_init(X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """Rotation taking X's principal axes onto Y's, signs fixed by third moments."""
    Xc = X - X.mean(axis=0)
    Yc = Y - Y.mean(axis=0)
    _, Ux = np.linalg.eigh(Xc.T @ Xc)
    _, Uy = np.linalg.eigh(Yc.T @ Yc)
    sx = np.sign(((Xc @ Ux) ** 3).sum(axis=0))
    sy = np.sign(((Yc @ Uy) ** 3).sum(axis=0))
    sx[sx == 0] = 1.0
    sy[sy == 0] = 1.0
    return (Uy * sy) @ (Ux * sx).T


class Discriminator:
    def __init__(self, d: int, hidden: int, leaky: float, rng: np.random.Generator):
        self.leaky = leaky
        self.W1 = rng.uniform(-1, 1, (d, hidden)) / math.sqrt(d)
        self.b1 = np.zeros(hidden)
        self.w2 = rng.uniform(-1, 1, hidden) / math.sqrt(hidden)
        self.b2 = 0.0

    def forward(self, x):
        a = x @ self.W1 + self.b1
        h = np.where(a > 0, a, self.leaky * a)
        return h @ self.w2 + self.b2, (x, a, h)

    def input_grad(self, g_logit, cache):
        _, a, _ = cache
        gh = np.outer(g_logit, self.w2) * np.where(a > 0, 1.0, self.leaky)
        return gh @ self.W1.T

    def step(self, g_logit, cache, lr):
        x, a, h = cache
        gh = np.outer(g_logit, self.w2) * np.where(a > 0, 1.0, self.leaky)
        self.w2 -= lr * (h.T @ g_logit)
        self.b2 -= lr * float(g_logit.sum())
        self.W1 -= lr * (x.T @ gh)
        self.b1 -= lr * gh.sum(axis=0)


def _bce(logits, y):
    return float(np.mean(np.logaddexp(0.0, logits) - y * logits))


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _as_array(Z) -> np.ndarray:
    return Z.vectors if isinstance(Z, EmbeddingTable) else np.asarray(Z, dtype=float)


def train_mapping(
    Z1, Z2, cfg: GanConfig = GanConfig(), W0: np.ndarray | None = None, check_orthogonalization: bool = False
) -> AlignmentModel:
    """Adversarially learn W so that rows of Z1 @ W.T look like rows of Z2.

    ``W0`` overrides the starting matrix chosen by ``cfg.init``. With
    ``check_orthogonalization`` every orthogonalization step is asserted
    not to increase ``||W^T W - I||_F`` (used by the test-suite).
    """
    X = normalize_rows(_as_array(Z1))
    Y = normalize_rows(_as_array(Z2))
    if X.shape[1] != Y.shape[1]:
        raise ValueError(f"dimension mismatch: {X.shape[1]} vs {Y.shape[1]}")
    if len(X) == 0 or len(Y) == 0:
        raise ValueError("both embedding tables must be non-empty")
    d = X.shape[1]
    rng = substream(cfg.seed, "gan")
    if W0 is not None:
        W = np.array(W0, dtype=float)
        if W.shape != (d, d):
            raise ValueError(f"starting matrix must be {d}x{d}")
    else:
        W = moment_init(X, Y) if cfg.init == "moments" else np.eye(d)
    dis = Discriminator(d, cfg.hidden, cfg.leaky, rng)
    bs = cfg.batch_size
    y_dis = np.r_[np.full(bs, cfg.label_smoothing), np.full(bs, 1.0 - cfg.label_smoothing)]
    history = []
    eye = np.eye(d)
    for epoch in range(cfg.epochs):
        d_losses = []
        for _ in range(cfg.iterations):
            for _ in range(cfg.dis_steps):
                x = np.vstack([X[rng.integers(0, len(X), bs)] @ W.T, Y[rng.integers(0, len(Y), bs)]])
                if cfg.input_noise > 0:
                    x = x + cfg.input_noise * rng.standard_normal(x.shape)
                logits, cache = dis.forward(x)
                loss = _bce(logits, y_dis)
                if not math.isfinite(loss):
                    raise FloatingPointError(f"discriminator loss is NaN at epoch {epoch}")
                d_losses.append(loss)
                dis.step((_sigmoid(logits) - y_dis) / len(y_dis), cache, cfg.lr_dis)
            z = X[rng.integers(0, len(X), bs)]
            logits, cache = dis.forward(z @ W.T)
            # generator wants its samples labelled as target
            g = (_sigmoid(logits) - (1.0 - cfg.label_smoothing)) / bs
            W = W - cfg.lr_gen * dis.input_grad(g, cache).T @ z
            if cfg.beta > 0:
                before = np.linalg.norm(W.T @ W - eye)
                W = orthogonalize(W, cfg.beta)
                if check_orthogonalization:
                    after = np.linalg.norm(W.T @ W - eye)
                    assert after <= before + 1e-12, (before, after)
            if not np.all(np.isfinite(W)):
                raise FloatingPointError(f"mapping diverged at epoch {epoch}")
        history.append({"epoch": epoch, "dis_loss": float(np.mean(d_losses))})
    return AlignmentModel(W, history)


# ---------------------------------------------------------------------------
# CSLS and anchors


def _topk_mean(M: np.ndarray, k: int, axis: int) -> np.ndarray:
    n = M.shape[axis]
    part = np.partition(M, n - k, axis=axis)
    top = np.take(part, np.arange(n - k, n), axis=axis)
    return top.mean(axis=axis)


def csls_from_cosines(C: np.ndarray, K: int) -> np.ndarray:
    n_s, n_t = C.shape
    if K < 1 or K > n_t or K > n_s:
        raise ValueError(f"K={K} must be in [1, min(|S|, |T|)] = [1, {min(n_s, n_t)}]")
    r_t = _topk_mean(C, K, axis=1)
    r_s = _topk_mean(C, K, axis=0)
    return 2.0 * C - r_t[:, None] - r_s[None, :]


def csls(S, T, K: int = 10) -> np.ndarray:
    """CSLS(s, t) = 2 cos(s, t) - r_T(s) - r_S(t); zero vectors get cosine 0."""
    S, T = _as_array(S), _as_array(T)
    if S.shape[1] != T.shape[1]:
        raise ValueError(f"dimension mismatch: {S.shape[1]} vs {T.shape[1]}")
    return csls_from_cosines(normalize_rows(S) @ normalize_rows(T).T, K)


def csls_accuracy(S, T, K: int = 10) -> float:
    """Fraction of rows i whose CSLS argmax is i (planted identity correspondence)."""
    M = csls(S, T, K)
    return float(np.mean(M.argmax(axis=1) == np.arange(len(M))))


@dataclass(frozen=True)
class AnchorSet:
    pairs: tuple[tuple[str, str], ...]
    scores: tuple[float, ...] = ()

    def __post_init__(self):
        pairs = tuple((str(a), str(b)) for a, b in self.pairs)
        scores = tuple(float(s) for s in self.scores) if self.scores else tuple(1.0 for _ in pairs)
        if len(scores) != len(pairs):
            raise ValueError("one score per anchor pair")
        src = [a for a, _ in pairs]
        tgt = [b for _, b in pairs]
        if len(set(src)) != len(src) or len(set(tgt)) != len(tgt):
            raise ValueError("anchor pairs must form a one-to-one matching")
        object.__setattr__(self, "pairs", pairs)
        object.__setattr__(self, "scores", scores)

    def __len__(self) -> int:
        return len(self.pairs)

    def indices(self, src_ids, tgt_ids) -> np.ndarray:
        si = {u: i for i, u in enumerate(src_ids)}
        ti = {u: i for i, u in enumerate(tgt_ids)}
        return np.array([[si[a], ti[b]] for a, b in self.pairs], dtype=np.int64).reshape(-1, 2)


def predict_anchors(Z1: EmbeddingTable, Z2: EmbeddingTable, model: AlignmentModel, K: int = 10, margin: float = 0.0) -> AnchorSet:
    """Mutual CSLS nearest neighbours scoring above ``margin``."""
    S = model.map(normalize_rows(Z1.vectors))
    T = normalize_rows(Z2.vectors)
    K = min(K, len(S), len(T))
    M = csls(S, T, K)
    fwd = M.argmax(axis=1)
    bwd = M.argmax(axis=0)
    pairs, scores = [], []
    for i, j in enumerate(fwd):
        if bwd[j] == i and M[i, j] > margin:
            pairs.append((Z1.ids[i], Z2.ids[j]))
            scores.append(float(M[i, j]))
    return AnchorSet(tuple(pairs), tuple(scores))


def save_anchors(anchors: AnchorSet, path: str | Path, header: dict | None = None) -> None:
    import json

    with open(path, "w", encoding="utf-8") as fh:
        if header:
            fh.write("# " + json.dumps(header, sort_keys=True) + "\n")
        for (a, b), s in zip(anchors.pairs, anchors.scores):
            fh.write(f"{a} {b} {s!r}\n")


def load_anchors(path: str | Path) -> AnchorSet:
    pairs, scores = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if line.startswith("#") or not line.strip():
                continue
            parts = line.split()
            if len(parts) != 3:
                raise ValueError(f"{path}:{lineno}: expected 'src tgt score'")
            pairs.append((parts[0], parts[1]))
            scores.append(float(parts[2]))
    return AnchorSet(tuple(pairs), tuple(scores))
