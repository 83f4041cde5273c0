"""Relation-aware two-layer graph encoder and its negative-sampling objective.

Layer update for node i (row convention, ``W`` maps d_in -> d_out)::

    h_i' = act( sum_r sum_{j in N_i^r} h_j W_r / |N_i^r|  +  h_i W_self )

Relations: ``friendship`` (user <- user), ``write`` (post <- author) and
``written_by`` (user <- own posts). The inverse relation is what lets post
content reach the user embeddings.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import sparse

from .embeddings import EmbeddingTable, WordEmbeddingTable
from .graph import HeteroGraph, UserGraph
from .optim import Adam
from .rng import substream

RELATIONS = ("friendship", "write", "written_by")
ACTIVATIONS = {
    "relu": (lambda x: np.maximum(x, 0.0), lambda x: (x > 0).astype(float)),
    "identity": (lambda x: x, lambda x: np.ones_like(x)),
}


@dataclass(frozen=True)
class NodeFeatures:
    user: np.ndarray
    post: np.ndarray

    def __post_init__(self):
        for name in ("user", "post"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.ndim != 2:
                raise ValueError(f"{name} features must be a matrix")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} features must be finite")
            object.__setattr__(self, name, arr)

    @property
    def dim(self) -> int:
        return self.user.shape[1] + self.post.shape[1]

    def stacked(self) -> np.ndarray:
        """Users then posts, each kind zero-padded into a shared input space."""
        nu, du = self.user.shape
        npost, dp = self.post.shape
        out = np.zeros((nu + npost, du + dp))
        out[:nu, :du] = self.user
        out[nu:, du:] = self.post
        return out


def build_node_features(g: HeteroGraph, words: WordEmbeddingTable | None) -> NodeFeatures:
    """Attributes (numeric + one-hot) for users, mean word vector for posts."""
    user = g.attrs.one_hot()
    if user.shape[1] == 0:
        user = np.ones((g.n_users, 1))
    if words is None:
        return NodeFeatures(user, np.zeros((g.n_posts, 1)))
    idx = words.index()
    post = np.zeros((g.n_posts, words.dim))
    for j, toks in enumerate(g.post_text):
        rows = [idx[t] for t in toks if t in idx]
        if rows:
            post[j] = words.vectors[rows].mean(axis=0)
    return NodeFeatures(user, post)


class RelationOps:
    """Row-normalized propagation matrices over the node set (users first, then posts)."""

    def __init__(self, g: HeteroGraph):
        nu, npost = g.n_users, g.n_posts
        N = nu + npost
        self.n_users, self.n_nodes = nu, N
        A = UserGraph(nu, g.friendship).adjacency()
        deg = np.asarray(A.sum(axis=1)).ravel()
        inv = np.divide(1.0, deg, out=np.zeros_like(deg), where=deg > 0)
        friend = sparse.diags(inv) @ A
        self.mats: dict[str, sparse.csr_matrix] = {}
        self.mats["friendship"] = sparse.block_diag([friend, sparse.csr_matrix((npost, npost))], format="csr")
        posts = np.arange(npost)
        write = sparse.csr_matrix((np.ones(npost), (nu + posts, g.author)), shape=(N, N))
        n_written = np.bincount(g.author, minlength=nu).astype(float)
        w = 1.0 / n_written[g.author] if npost else np.zeros(0)
        written_by = sparse.csr_matrix((w, (g.author, nu + posts)), shape=(N, N))
        self.mats["write"] = write
        self.mats["written_by"] = written_by
        self.mats_T = {k: m.T.tocsr() for k, m in self.mats.items()}


@dataclass
class HeteroEncoderParams:
    layers: list[dict[str, np.ndarray]]
    activations: tuple[str, ...] = ("relu", "identity")

    @property
    def dims(self) -> list[int]:
        return [self.layers[0]["self"].shape[0]] + [L["self"].shape[1] for L in self.layers]

    @classmethod
    def init(cls, dims: Sequence[int], rng: np.random.Generator, activations=("relu", "identity")) -> "HeteroEncoderParams":
        layers = []
        for d_in, d_out in zip(dims[:-1], dims[1:]):
            bound = 1.0 / np.sqrt(d_in)
            layers.append({k: rng.uniform(-bound, bound, (d_in, d_out)) for k in (*RELATIONS, "self")})
        return cls(layers, tuple(activations))

    def arrays(self) -> dict[str, np.ndarray]:
        return {f"l{i}.{k}": v for i, L in enumerate(self.layers) for k, v in L.items()}

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], activations=("relu", "identity")) -> "HeteroEncoderParams":
        n = 1 + max(int(k.split(".")[0][1:]) for k in arrays)
        layers = [{k: np.array(arrays[f"l{i}.{k}"]) for k in (*RELATIONS, "self")} for i in range(n)]
        return cls(layers, tuple(activations))

    def copy(self) -> "HeteroEncoderParams":
        return HeteroEncoderParams([{k: v.copy() for k, v in L.items()} for L in self.layers], self.activations)


def _forward(ops: RelationOps, X: np.ndarray, p: HeteroEncoderParams):
    if X.shape[1] != p.dims[0]:
        raise ValueError(f"feature dimension {X.shape[1]} does not match encoder input {p.dims[0]}")
    cache = []
    h = X
    for L, act in zip(p.layers, p.activations):
        agg = {r: ops.mats[r] @ h for r in RELATIONS}
        pre = h @ L["self"]
        for r in RELATIONS:
            pre = pre + agg[r] @ L[r]
        cache.append((h, agg, pre, act))
        h = ACTIVATIONS[act][0](pre)
    return h, cache


def _backward(ops: RelationOps, p: HeteroEncoderParams, cache, d_out: np.ndarray) -> dict[str, np.ndarray]:
    grads: dict[str, np.ndarray] = {}
    dh = d_out
    for i in reversed(range(len(p.layers))):
        h, agg, pre, act = cache[i]
        L = p.layers[i]
        dpre = dh * ACTIVATIONS[act][1](pre)
        grads[f"l{i}.self"] = h.T @ dpre
        dh = dpre @ L["self"].T
        for r in RELATIONS:
            grads[f"l{i}.{r}"] = agg[r].T @ dpre
            dh = dh + ops.mats_T[r] @ (dpre @ L[r].T)
    return grads


def encode(g: HeteroGraph, feats: NodeFeatures, p: HeteroEncoderParams, ops: RelationOps | None = None) -> EmbeddingTable:
    ops = ops or RelationOps(g)
    if feats.user.shape[0] != g.n_users or feats.post.shape[0] != g.n_posts:
        raise ValueError("node feature rows do not match the graph")
    h, _ = _forward(ops, feats.stacked(), p)
    return EmbeddingTable(g.users, h[: g.n_users])


# ---------------------------------------------------------------------------
# objective


def positive_pairs(ug: UserGraph) -> np.ndarray:
    """Both orientations of every friendship edge."""
    e = ug.edges
    return np.vstack([e, e[:, ::-1]]) if len(e) else np.zeros((0, 2), dtype=np.int64)


class NegativeSampler:
    """Draws users with probability proportional to degree**exponent."""

    def __init__(self, degrees: np.ndarray, exponent: float = 0.75):
        w = np.asarray(degrees, dtype=float) ** exponent
        w[np.asarray(degrees) == 0] = 0.0
        if w.sum() <= 0:
            w = np.ones_like(w)
        self.cdf = np.cumsum(w / w.sum())

    def sample(self, n_pairs: int, q: int, rng: np.random.Generator) -> np.ndarray:
        u = rng.random((n_pairs, q))
        return np.minimum(np.searchsorted(self.cdf, u * self.cdf[-1], side="right"), len(self.cdf) - 1)


def loss_graph_grad(Z: np.ndarray, pos_pairs: np.ndarray, negatives: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean over pairs of ``-log s(z_u.z_v) - sum_q log s(-z_u.z_nq)`` and dL/dZ."""
    pos_pairs = np.asarray(pos_pairs, dtype=np.int64).reshape(-1, 2)
    if len(pos_pairs) == 0:
        raise ValueError("loss needs at least one positive pair")
    negatives = np.asarray(negatives, dtype=np.int64).reshape(len(pos_pairs), -1)
    u, v = pos_pairs[:, 0], pos_pairs[:, 1]
    zu = Z[u]
    s = np.einsum("pd,pd->p", zu, Z[v])
    zn = Z[negatives]
    t = np.einsum("pqd,pd->pq", zn, zu)
    P = len(pos_pairs)
    loss = (np.logaddexp(0.0, -s).sum() + np.logaddexp(0.0, t).sum()) / P
    gs = (0.5 * (1.0 + np.tanh(0.5 * s)) - 1.0) / P
    gt = 0.5 * (1.0 + np.tanh(0.5 * t)) / P
    dZ = np.zeros_like(Z)
    np.add.at(dZ, u, gs[:, None] * Z[v] + np.einsum("pq,pqd->pd", gt, zn))
    np.add.at(dZ, v, gs[:, None] * zu)
    if negatives.shape[1]:
        np.add.at(dZ, negatives.reshape(-1), (gt[:, :, None] * zu[:, None, :]).reshape(-1, Z.shape[1]))
    return float(loss), dZ


def loss_graph(z, pos_pairs, negatives) -> float:
    Z = z.vectors if isinstance(z, EmbeddingTable) else np.asarray(z, dtype=float)
    return loss_graph_grad(Z, pos_pairs, negatives)[0]


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    epochs: int = 50
    negatives: int = 5
    neg_exponent: float = 0.75
    seed: int = 0
    deterministic: bool = True
    hidden_dim: int = 256
    out_dim: int = 128

    def __post_init__(self):
        if self.negatives < 0:
            raise ValueError("negatives must be >= 0")
        if self.epochs < 0 or not self.learning_rate > 0:
            raise ValueError("epochs must be >= 0 and learning_rate positive")


def encoder_loss_and_grads(ops, X, p, pos, neg):
    h, cache = _forward(ops, X, p)
    Z = h[: ops.n_users]
    loss, dZ = loss_graph_grad(Z, pos, neg)
    d_out = np.zeros_like(h)
    d_out[: ops.n_users] = dZ
    return loss, _backward(ops, p, cache, d_out)


@dataclass
class HeteroRun:
    params: HeteroEncoderParams
    embeddings: EmbeddingTable
    losses: list[float] = field(default_factory=list)


def fit_hetero(g: HeteroGraph, feats: NodeFeatures, cfg: TrainConfig = TrainConfig()) -> HeteroRun:
    ops = RelationOps(g)
    X = feats.stacked()
    rng = substream(cfg.seed, "hetero")
    params = HeteroEncoderParams.init([X.shape[1], cfg.hidden_dim, cfg.out_dim], rng)
    ug = UserGraph(g.n_users, g.friendship)
    pos = positive_pairs(ug)
    losses: list[float] = []
    if cfg.epochs > 0:
        if len(pos) == 0:
            raise ValueError("graph has no friendship edges to train on")
        sampler = NegativeSampler(ug.degrees(), cfg.neg_exponent)
        flat = params.arrays()
        opt = Adam(flat, lr=cfg.learning_rate)
        for epoch in range(cfg.epochs):
            current = HeteroEncoderParams.from_arrays(flat, params.activations)
            neg = sampler.sample(len(pos), cfg.negatives, rng)
            loss, grads = encoder_loss_and_grads(ops, X, current, pos, neg)
            if not np.isfinite(loss):
                raise FloatingPointError(f"encoder loss diverged at epoch {epoch}")
            losses.append(loss)
            opt.step(grads)
        params = HeteroEncoderParams.from_arrays(flat, params.activations)
    emb = encode(g, feats, params, ops)
    if not np.all(np.isfinite(emb.vectors)):
        raise FloatingPointError("encoder produced non-finite embeddings")
    return HeteroRun(params, emb, losses)


def train_hetero(g: HeteroGraph, feats: NodeFeatures, cfg: TrainConfig = TrainConfig()):
    run = fit_hetero(g, feats, cfg)
    return run.params, run.embeddings
