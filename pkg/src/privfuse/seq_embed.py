"""Skip-gram with negative sampling over token sequences, plus uniform random walks.

The same trainer embeds words (for the text sanitizer and post features) and
graph nodes (DeepWalk-style features for budget allocation).
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .embeddings import EmbeddingTable, WordEmbeddingTable
from .graph import UserGraph
from .rng import substream


@dataclass(frozen=True)
class SkipGramConfig:
    dim: int = 64
    window: int = 5
    negatives: int = 5
    epochs: int = 5
    learning_rate: float = 0.025
    seed: int = 0
    min_count: int = 1
    batch_size: int = 64
    neg_exponent: float = 0.75

    def __post_init__(self):
        for name in ("dim", "window", "negatives", "epochs", "min_count", "batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")


@dataclass(frozen=True)
class WalkConfig:
    walks_per_node: int = 10
    walk_length: int = 40
    seed: int = 0

    def __post_init__(self):
        if self.walks_per_node < 1 or self.walk_length < 1:
            raise ValueError("walk counts must be positive")


def _log_sigmoid(x):
    return -np.logaddexp(0.0, -x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def skipgram_loss(W_in, W_out, centers, contexts, negatives):
    """Summed negative-sampling loss and its gradients.

    ``negatives`` has shape (batch, k). Returns ``(loss, dW_in, dW_out)``.
    """
    u = W_in[centers]
    v = W_out[contexts]
    nv = W_out[negatives]
    pos = np.einsum("bd,bd->b", u, v)
    neg = np.einsum("bkd,bd->bk", nv, u)
    loss = -_log_sigmoid(pos).sum() - _log_sigmoid(-neg).sum()
    gp = _sigmoid(pos) - 1.0
    gn = _sigmoid(neg)
    du = gp[:, None] * v + np.einsum("bk,bkd->bd", gn, nv)
    dv = gp[:, None] * u
    dn = gn[:, :, None] * u[:, None, :]
    dW_in = np.zeros_like(W_in)
    dW_out = np.zeros_like(W_out)
    np.add.at(dW_in, centers, du)
    np.add.at(dW_out, contexts, dv)
    np.add.at(dW_out, negatives.reshape(-1), dn.reshape(-1, W_in.shape[1]))
    return loss, dW_in, dW_out


def _context_pairs(encoded: list[np.ndarray], window: int) -> np.ndarray:
    pairs = []
    for seq in encoded:
        for off in range(1, min(window, len(seq) - 1) + 1):
            a, b = seq[:-off], seq[off:]
            pairs.append(np.column_stack([a, b]))
            pairs.append(np.column_stack([b, a]))
    if not pairs:
        return np.zeros((0, 2), dtype=np.int64)
    return np.vstack(pairs).astype(np.int64)


def train_skipgram(sequences: Sequence[Sequence[str]], cfg: SkipGramConfig = SkipGramConfig()) -> WordEmbeddingTable:
    counts = Counter(tok for seq in sequences for tok in seq)
    vocab = sorted((t for t, c in counts.items() if c >= cfg.min_count), key=lambda t: (-counts[t], t))
    if not vocab:
        raise ValueError("corpus is empty after min-count filtering")
    index = {t: i for i, t in enumerate(vocab)}
    encoded = [np.array([index[t] for t in seq if t in index], dtype=np.int64) for seq in sequences]
    pairs = _context_pairs(encoded, cfg.window)

    V, d = len(vocab), cfg.dim
    rng = substream(cfg.seed, "skipgram")
    W_in = (rng.random((V, d)) - 0.5) / d
    W_out = np.zeros((V, d))
    freq = np.array([counts[t] for t in vocab], dtype=float) ** cfg.neg_exponent
    neg_cdf = np.cumsum(freq / freq.sum())

    n_pairs = len(pairs)
    steps_per_epoch = -(-n_pairs // cfg.batch_size)
    total = max(steps_per_epoch * cfg.epochs, 1)
    step = 0
    for _ in range(cfg.epochs):
        if n_pairs == 0:
            break
        order = rng.permutation(n_pairs)
        for start in range(0, n_pairs, cfg.batch_size):
            batch = pairs[order[start : start + cfg.batch_size]]
            negs = np.searchsorted(neg_cdf, rng.random((len(batch), cfg.negatives)) * neg_cdf[-1], side="right")
            negs = np.minimum(negs, V - 1)
            lr = cfg.learning_rate * max(1.0 - step / total, 1e-4)
            _, g_in, g_out = skipgram_loss(W_in, W_out, batch[:, 0], batch[:, 1], negs)
            W_in -= lr * g_in
            W_out -= lr * g_out
            step += 1
    if not np.all(np.isfinite(W_in)):
        raise FloatingPointError("skip-gram training produced non-finite vectors")
    return WordEmbeddingTable(tuple(vocab), W_in)


def random_walks(g: UserGraph, cfg: WalkConfig = WalkConfig()) -> list[list[int]]:
    """``walks_per_node`` uniform walks from every node; isolated nodes give ``[v]``."""
    adj = g.adjacency()
    indptr, indices = adj.indptr, adj.indices
    deg = np.diff(indptr)
    rng = substream(cfg.seed, "walks")
    walks: list[list[int]] = []
    for _ in range(cfg.walks_per_node):
        start = rng.permutation(g.n)
        steps = [start]
        cur = start
        alive = deg[start] > 0
        for _ in range(cfg.walk_length - 1):
            u = rng.random(len(cur))
            off = np.floor(u * np.maximum(deg[cur], 1)).astype(np.int64)
            nxt = np.where(alive, indices[np.minimum(indptr[cur] + off, len(indices) - 1)] if len(indices) else cur, cur)
            steps.append(nxt)
            cur = nxt
        mat = np.column_stack(steps)
        for row, ok in zip(mat, alive):
            walks.append(row.tolist() if ok else [int(row[0])])
    return walks


def deepwalk(g: UserGraph, ids: Sequence[str], walk_cfg: WalkConfig = WalkConfig(), sg_cfg: SkipGramConfig = SkipGramConfig()) -> EmbeddingTable:
    """Node embeddings keyed by ``ids`` (index ``i`` -> ``ids[i]``)."""
    walks = random_walks(g, walk_cfg)
    table = train_skipgram([[str(v) for v in w] for w in walks], sg_cfg)
    idx = table.index()
    vec = np.vstack([table.vectors[idx[str(i)]] for i in range(g.n)])
    return EmbeddingTable(tuple(ids), vec)
