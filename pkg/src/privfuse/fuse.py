"""Cross-network fusion of two user-embedding tables.

Forward pass for one network (rows are users, ``W`` acts on row vectors)::

    Z'[a]  = act(Z1[a] + Z2[b] @ W21.T)             for anchor pairs (a, b)
    P_0    = Z',  P_l = A_hat @ P_{l-1}
    H^l    = alpha * D_anchor @ Z' + P_l             l = 1..k
    O      = act([Z', H^1, ..., H^k] @ W_u)

``A_hat`` is the symmetric degree normalization of the friendship graph with no
self-loops. The ``iterative`` ablation replaces the hierarchy step with ``k``
plain graph-convolution layers ``act(A_hat @ h @ W)``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .align import AnchorSet
from .embeddings import EmbeddingTable
from .graph import UserGraph
from .hetero_embed import ACTIVATIONS, NegativeSampler, TrainConfig, loss_graph_grad, positive_pairs
from .optim import Adam
from .rng import substream

MODES = ("hierarchy", "iterative")


@dataclass(frozen=True)
class FusionConfig:
    k: int = 4
    alpha: float = 2.0
    out_dim: int = 128
    activation: str = "identity"
    inter_activation: str = "relu"
    mode: str = "hierarchy"

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("hop depth k must be >= 1")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if self.out_dim < 1:
            raise ValueError("out_dim must be positive")
        for a in (self.activation, self.inter_activation):
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")


@dataclass
class FusionParams:
    """Trainable maps plus the fixed hyperparameters they were built for.

    In hierarchy mode ``Wu1``/``Wu2`` are single ``((k+1)d, d_out)`` matrices;
    in iterative mode they are lists of ``k`` layer matrices.
    """

    W12: np.ndarray
    W21: np.ndarray
    Wu1: np.ndarray | list
    Wu2: np.ndarray | list
    alpha: float = 2.0
    k: int = 4
    activation: str = "identity"
    mode: str = "hierarchy"
    inter_activation: str = "relu"

    def __post_init__(self):
        d = self.W12.shape[0]
        if self.W12.shape != (d, d) or self.W21.shape != (d, d):
            raise ValueError("cross-space maps must both be d x d")
        if self.k < 1 or self.alpha < 0:
            raise ValueError("need k >= 1 and alpha >= 0")
        if self.mode == "hierarchy":
            for W in (self.Wu1, self.Wu2):
                if W.shape[0] != (self.k + 1) * d:
                    raise ValueError(f"output map needs {(self.k + 1) * d} rows, got {W.shape[0]}")
        else:
            for Ws in (self.Wu1, self.Wu2):
                if len(Ws) != self.k or Ws[0].shape[0] != d:
                    raise ValueError("iterative mode needs k layer matrices starting at dimension d")

    @property
    def dim(self) -> int:
        return self.W12.shape[0]

    @classmethod
    def init(cls, d: int, cfg: FusionConfig, rng: np.random.Generator) -> "FusionParams":
        def u(shape):
            return rng.uniform(-1.0, 1.0, shape) / np.sqrt(shape[0])

        W12, W21 = u((d, d)), u((d, d))
        if cfg.mode == "hierarchy":
            Wu1, Wu2 = u(((cfg.k + 1) * d, cfg.out_dim)), u(((cfg.k + 1) * d, cfg.out_dim))
        else:
            dims = [d] + [cfg.out_dim] * cfg.k
            Wu1 = [u((a, b)) for a, b in zip(dims[:-1], dims[1:])]
            Wu2 = [u((a, b)) for a, b in zip(dims[:-1], dims[1:])]
        return cls(W12, W21, Wu1, Wu2, cfg.alpha, cfg.k, cfg.activation, cfg.mode, cfg.inter_activation)

    def arrays(self) -> dict[str, np.ndarray]:
        out = {"W12": self.W12, "W21": self.W21}
        if self.mode == "hierarchy":
            out["Wu1"], out["Wu2"] = self.Wu1, self.Wu2
        else:
            for i, (a, b) in enumerate(zip(self.Wu1, self.Wu2)):
                out[f"Wu1.{i}"], out[f"Wu2.{i}"] = a, b
        return out

    def with_arrays(self, arrays: dict[str, np.ndarray]) -> "FusionParams":
        if self.mode == "hierarchy":
            Wu1, Wu2 = arrays["Wu1"], arrays["Wu2"]
        else:
            Wu1 = [arrays[f"Wu1.{i}"] for i in range(self.k)]
            Wu2 = [arrays[f"Wu2.{i}"] for i in range(self.k)]
        return FusionParams(
            arrays["W12"], arrays["W21"], Wu1, Wu2, self.alpha, self.k, self.activation, self.mode, self.inter_activation
        )


def normalized_adjacency(g: UserGraph) -> sparse.csr_matrix:
    """``D^-1/2 A D^-1/2``; rows of isolated users are zero."""
    A = g.adjacency().astype(float)
    deg = np.asarray(A.sum(axis=1)).ravel()
    inv = np.divide(1.0, np.sqrt(deg), out=np.zeros_like(deg), where=deg > 0)
    D = sparse.diags(inv)
    return (D @ A @ D).tocsr()


def anchor_mask(n: int, rows: np.ndarray) -> np.ndarray:
    """0/1 diagonal of the anchor indicator, as a vector."""
    rows = np.asarray(rows, dtype=np.int64)
    if len(rows) and (rows.min() < 0 or rows.max() >= n):
        raise ValueError(f"anchor rows must lie in [0, {n})")
    m = np.zeros(n)
    m[rows] = 1.0
    return m


def inter_propagate(z1: np.ndarray, z2: np.ndarray, p: FusionParams) -> tuple[np.ndarray, np.ndarray]:
    """Fuse one anchor pair (or stacked pairs, one per row)."""
    z1, z2 = np.asarray(z1, dtype=float), np.asarray(z2, dtype=float)
    if z1.shape != z2.shape or z1.shape[-1] != p.dim:
        raise ValueError(f"anchor vectors must both have dimension {p.dim}")
    act = ACTIVATIONS[p.inter_activation][0]
    return act(z1 + z2 @ p.W21.T), act(z2 + z1 @ p.W12.T)


def _inter_all(Z1, Z2, pairs, p):
    Z1p, Z2p = Z1.copy(), Z2.copy()
    if len(pairs):
        a, b = pairs[:, 0], pairs[:, 1]
        u1 = Z1[a] + Z2[b] @ p.W21.T
        u2 = Z2[b] + Z1[a] @ p.W12.T
        act = ACTIVATIONS[p.inter_activation][0]
        Z1p[a], Z2p[b] = act(u1), act(u2)
    else:
        u1 = u2 = None
    return Z1p, Z2p, (u1, u2)


def hierarchy_features(A_hat, mask: np.ndarray, Zp: np.ndarray, alpha: float, k: int) -> list[np.ndarray]:
    """``[Z', H^1, ..., H^k]`` with the powers of ``A_hat`` applied one hop at a time."""
    if A_hat.shape != (len(Zp), len(Zp)) or len(mask) != len(Zp):
        raise ValueError("adjacency, anchor mask and embeddings disagree on the number of users")
    emph = alpha * mask[:, None] * Zp
    blocks = [Zp]
    P = Zp
    for _ in range(k):
        P = A_hat @ P
        blocks.append(emph + P)
    return blocks


def hierarchy_propagate(A_hat, mask, Zp, p: FusionParams, Wu: np.ndarray) -> np.ndarray:
    S = np.hstack(hierarchy_features(A_hat, mask, np.asarray(Zp, dtype=float), p.alpha, p.k))
    if S.shape[1] != Wu.shape[0]:
        raise ValueError(f"stacked features have width {S.shape[1]}, output map expects {Wu.shape[0]}")
    return ACTIVATIONS[p.activation][0](S @ Wu)


def _side_forward(A_hat, mask, Zp, p, Wu):
    act = ACTIVATIONS[p.activation][0]
    if p.mode == "hierarchy":
        S = np.hstack(hierarchy_features(A_hat, mask, Zp, p.alpha, p.k))
        pre = S @ Wu
        return act(pre), (S, pre)
    h, cache = Zp, []
    for W in Wu:
        agg = A_hat @ h
        pre = agg @ W
        cache.append((agg, pre))
        h = act(pre)
    return h, cache


def _side_backward(A_hat, mask, p, Wu, cache, dO):
    """Returns (dWu, dZ')."""
    dact = ACTIVATIONS[p.activation][1]
    d = p.dim
    if p.mode == "hierarchy":
        S, pre = cache
        dpre = dO * dact(pre)
        dWu = S.T @ dpre
        dS = dpre @ Wu.T
        B = [dS[:, i * d : (i + 1) * d] for i in range(p.k + 1)]
        # sum_l A^l B_l, nested so only one hop is applied at a time (A_hat symmetric)
        acc = B[p.k]
        for l in range(p.k - 1, 0, -1):
            acc = B[l] + A_hat @ acc
        dZ = B[0] + A_hat @ acc + p.alpha * mask[:, None] * sum(B[1:])
        return dWu, dZ
    grads = [None] * len(Wu)
    dh = dO
    for i in reversed(range(len(Wu))):
        agg, pre = cache[i]
        dpre = dh * dact(pre)
        grads[i] = agg.T @ dpre
        dh = A_hat.T @ (dpre @ Wu[i].T)
    return grads, dh


@dataclass
class FusionProblem:
    """Everything fixed during fusion training, in index space."""

    Z1: np.ndarray
    Z2: np.ndarray
    A1: sparse.csr_matrix
    A2: sparse.csr_matrix
    pairs: np.ndarray
    mask1: np.ndarray = field(init=False)
    mask2: np.ndarray = field(init=False)

    def __post_init__(self):
        self.Z1 = np.asarray(self.Z1, dtype=float)
        self.Z2 = np.asarray(self.Z2, dtype=float)
        if self.Z1.shape[1] != self.Z2.shape[1]:
            raise ValueError(f"embedding dimensions differ: {self.Z1.shape[1]} vs {self.Z2.shape[1]}")
        self.pairs = np.asarray(self.pairs, dtype=np.int64).reshape(-1, 2)
        self.mask1 = anchor_mask(len(self.Z1), self.pairs[:, 0])
        self.mask2 = anchor_mask(len(self.Z2), self.pairs[:, 1])


def forward(prob: FusionProblem, p: FusionParams):
    if prob.Z1.shape[1] != p.dim:
        raise ValueError(f"embedding dimension {prob.Z1.shape[1]} does not match fusion maps ({p.dim})")
    Z1p, Z2p, inter = _inter_all(prob.Z1, prob.Z2, prob.pairs, p)
    O1, c1 = _side_forward(prob.A1, prob.mask1, Z1p, p, p.Wu1)
    O2, c2 = _side_forward(prob.A2, prob.mask2, Z2p, p, p.Wu2)
    return O1, O2, (inter, c1, c2)


def alignment_penalty(O1: np.ndarray, O2: np.ndarray, pairs: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean squared distance over anchor pairs and its gradients."""
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    g1, g2 = np.zeros_like(O1), np.zeros_like(O2)
    if len(pairs) == 0:
        return 0.0, g1, g2
    diff = O1[pairs[:, 0]] - O2[pairs[:, 1]]
    n = len(pairs)
    np.add.at(g1, pairs[:, 0], 2.0 * diff / n)
    np.add.at(g2, pairs[:, 1], -2.0 * diff / n)
    return float((diff**2).sum() / n), g1, g2


def total_loss_and_grads(prob: FusionProblem, p: FusionParams, pos1, neg1, pos2, neg2):
    O1, O2, (inter, c1, c2) = forward(prob, p)
    l1, dO1 = loss_graph_grad(O1, pos1, neg1)
    l2, dO2 = loss_graph_grad(O2, pos2, neg2)
    reg, r1, r2 = alignment_penalty(O1, O2, prob.pairs)
    dWu1, dZ1p = _side_backward(prob.A1, prob.mask1, p, p.Wu1, c1, dO1 + r1)
    dWu2, dZ2p = _side_backward(prob.A2, prob.mask2, p, p.Wu2, c2, dO2 + r2)
    grads = {"W12": np.zeros_like(p.W12), "W21": np.zeros_like(p.W21)}
    u1, u2 = inter
    if u1 is not None:
        dact = ACTIVATIONS[p.inter_activation][1]
        a, b = prob.pairs[:, 0], prob.pairs[:, 1]
        du1 = dZ1p[a] * dact(u1)
        du2 = dZ2p[b] * dact(u2)
        grads["W21"] = du1.T @ prob.Z2[b]
        grads["W12"] = du2.T @ prob.Z1[a]
    if p.mode == "hierarchy":
        grads["Wu1"], grads["Wu2"] = dWu1, dWu2
    else:
        for i in range(p.k):
            grads[f"Wu1.{i}"], grads[f"Wu2.{i}"] = dWu1[i], dWu2[i]
    return l1 + l2 + reg, grads, (O1, O2)


def _pairs_of(anchors: AnchorSet | np.ndarray, ids1, ids2) -> np.ndarray:
    if isinstance(anchors, AnchorSet):
        return anchors.indices(ids1, ids2)
    return np.asarray(anchors, dtype=np.int64).reshape(-1, 2)


def total_loss(O1, O2, g1: UserGraph, g2: UserGraph, anchors, cfg: TrainConfig = TrainConfig(), rng=None) -> float:
    """Graph losses on both outputs plus the anchor penalty.

    Negatives are drawn from ``rng`` (default: the ``cfg.seed`` substream).
    """
    ids1 = O1.ids if isinstance(O1, EmbeddingTable) else None
    ids2 = O2.ids if isinstance(O2, EmbeddingTable) else None
    A = O1.vectors if isinstance(O1, EmbeddingTable) else np.asarray(O1, dtype=float)
    B = O2.vectors if isinstance(O2, EmbeddingTable) else np.asarray(O2, dtype=float)
    pairs = _pairs_of(anchors, ids1, ids2)
    if len(pairs) == 0:
        warnings.warn("no anchors: fusion degenerates to two independent graphs", stacklevel=2)
    rng = rng or substream(cfg.seed, "fusion-loss")
    out = 0.0
    for Z, g in ((A, g1), (B, g2)):
        pos = positive_pairs(g)
        neg = NegativeSampler(g.degrees(), cfg.neg_exponent).sample(len(pos), cfg.negatives, rng)
        out += loss_graph_grad(Z, pos, neg)[0]
    return out + alignment_penalty(A, B, pairs)[0]


@dataclass
class FusionRun:
    params: FusionParams
    O1: EmbeddingTable
    O2: EmbeddingTable
    losses: list[float]
    n_anchors: int

    def manifest(self, cfg: TrainConfig, fcfg: FusionConfig) -> dict:
        return {
            "seed": cfg.seed,
            "train": {k: getattr(cfg, k) for k in cfg.__dataclass_fields__},
            "fusion": {k: getattr(fcfg, k) for k in fcfg.__dataclass_fields__},
            "anchors": self.n_anchors,
            "losses": [float(x) for x in self.losses],
        }


def fit_fusion(
    g1: UserGraph,
    g2: UserGraph,
    Z1: EmbeddingTable,
    Z2: EmbeddingTable,
    anchors: AnchorSet | np.ndarray,
    cfg: TrainConfig = TrainConfig(),
    fcfg: FusionConfig = FusionConfig(),
) -> FusionRun:
    if len(Z1) != g1.n or len(Z2) != g2.n:
        raise ValueError("embedding tables must have one row per user of their graph")
    pairs = _pairs_of(anchors, Z1.ids, Z2.ids)
    if len(pairs) == 0:
        warnings.warn("no anchors: fusion degenerates to two independent graphs", stacklevel=2)
    prob = FusionProblem(Z1.vectors, Z2.vectors, normalized_adjacency(g1), normalized_adjacency(g2), pairs)
    rng = substream(cfg.seed, "fusion")
    p = FusionParams.init(prob.Z1.shape[1], fcfg, rng)
    losses: list[float] = []
    if cfg.epochs > 0:
        pos1, pos2 = positive_pairs(g1), positive_pairs(g2)
        s1 = NegativeSampler(g1.degrees(), cfg.neg_exponent)
        s2 = NegativeSampler(g2.degrees(), cfg.neg_exponent)
        flat = {k: v.copy() for k, v in p.arrays().items()}
        opt = Adam(flat, lr=cfg.learning_rate)
        for epoch in range(cfg.epochs):
            neg1 = s1.sample(len(pos1), cfg.negatives, rng)
            neg2 = s2.sample(len(pos2), cfg.negatives, rng)
            loss, grads, _ = total_loss_and_grads(prob, p.with_arrays(flat), pos1, neg1, pos2, neg2)
            if not np.isfinite(loss):
                raise FloatingPointError(f"fusion loss diverged at epoch {epoch}")
            losses.append(loss)
            opt.step(grads)
        p = p.with_arrays(flat)
    O1, O2, _ = forward(prob, p)
    if not (np.all(np.isfinite(O1)) and np.all(np.isfinite(O2))):
        raise FloatingPointError("fusion produced non-finite embeddings")
    return FusionRun(p, EmbeddingTable(Z1.ids, O1), EmbeddingTable(Z2.ids, O2), losses, len(pairs))


def train_fusion(g1, g2, Z1, Z2, anchors, cfg: TrainConfig = TrainConfig(), fcfg: FusionConfig = FusionConfig()):
    run = fit_fusion(g1, g2, Z1, Z2, anchors, cfg, fcfg)
    return run.O1, run.O2
