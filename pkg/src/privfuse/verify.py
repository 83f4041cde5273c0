"""Fast invariant checks, runnable from the command line."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .embeddings import WordEmbeddingTable
from .fuse import FusionConfig, FusionParams, FusionProblem, hierarchy_features, normalized_adjacency, total_loss_and_grads
from .graph import UserGraph, parse_records
from .hetero_embed import (
    HeteroEncoderParams,
    NegativeSampler,
    RelationOps,
    build_node_features,
    encoder_loss_and_grads,
    positive_pairs,
)
from .hybrid_dp import mdp_probabilities, piecewise_mechanism
from .rng import substream


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    den = max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / den)


def numeric_grad(f: Callable[[], float], arrays: dict[str, np.ndarray], h: float = 1e-6) -> dict[str, np.ndarray]:
    """Central differences of ``f`` w.r.t. every entry of ``arrays`` (perturbed in place)."""
    out = {}
    for k, v in arrays.items():
        g = np.zeros_like(v)
        for idx in np.ndindex(v.shape):
            old = v[idx]
            v[idx] = old + h
            fp = f()
            v[idx] = old - h
            fm = f()
            v[idx] = old
            g[idx] = (fp - fm) / (2 * h)
        out[k] = g
    return out


def mdp_ratio_check(eps_values=(0.5, 2.0, 7.5), n_words: int = 10, dim: int = 3, seed: int = 0) -> float:
    """Largest ``log P(y|x) - log P(y|x') - eps d(x, x')`` over all triples (should be <= 0)."""
    vec = substream(seed, "verify-mdp").standard_normal((n_words, dim))
    d = np.linalg.norm(vec[:, None] - vec[None], axis=-1)
    worst = -np.inf
    for eps in eps_values:
        logp = np.log(mdp_probabilities(vec, eps))
        excess = logp[:, None, :] - logp[None, :, :] - eps * d[:, :, None]
        worst = max(worst, float(excess.max()))
    return worst


def pm_bias_check(ts=(-1.0, -0.3, 0.0, 0.7, 1.0), eps_values=(0.5, 1.0, 5.0), draws: int = 100_000, seed: int = 0) -> float:
    """Largest ``|mean - t| / SE`` over the grid."""
    worst = 0.0
    for i, eps in enumerate(eps_values):
        for j, t in enumerate(ts):
            x = piecewise_mechanism(np.full(draws, t), eps, substream(seed, "verify-pm", i, j))
            se = x.std(ddof=1) / np.sqrt(draws)
            worst = max(worst, abs(x.mean() - t) / se)
    return worst


def tiny_hetero_graph(seed: int, n_users: int = 5):
    rng = substream(seed, "tiny-graph")
    recs = [
        {"kind": "user", "id": f"u{i}", "attrs": {"x": float(rng.normal()), "c": {"cat": int(rng.integers(0, 2)), "n": 2}}}
        for i in range(n_users)
    ]
    recs += [{"kind": "post", "id": f"p{j}", "author": f"u{int(rng.integers(0, n_users))}", "text": "a b c"} for j in range(3)]
    edges = set()
    for i in range(1, n_users):
        edges.add((int(rng.integers(0, i)), i))
    while len(edges) < n_users + 1:
        a, b = sorted(int(x) for x in rng.choice(n_users, 2, replace=False))
        edges.add((a, b))
    recs += [{"kind": "friend", "a": f"u{a}", "b": f"u{b}"} for a, b in sorted(edges)]
    return parse_records(enumerate(recs, start=1))


def encoder_gradient_error(seed: int) -> float:
    rng = substream(seed, "verify-encoder")
    g = tiny_hetero_graph(seed)
    words = WordEmbeddingTable(("a", "b", "c"), rng.standard_normal((3, 3)))
    X = build_node_features(g, words).stacked()
    ops = RelationOps(g)
    p = HeteroEncoderParams.init([X.shape[1], 4, 3], rng)
    ug = UserGraph(g.n_users, g.friendship)
    pos = positive_pairs(ug)
    neg = NegativeSampler(ug.degrees()).sample(len(pos), 2, rng)
    flat = p.arrays()
    _, grads = encoder_loss_and_grads(ops, X, p, pos, neg)

    def f():
        return encoder_loss_and_grads(ops, X, HeteroEncoderParams.from_arrays(flat, p.activations), pos, neg)[0]

    num = numeric_grad(f, flat)
    return max(rel_error(num[k], grads[k]) for k in flat)


def fusion_gradient_error(seed: int, mode: str = "hierarchy") -> float:
    rng = substream(seed, "verify-fusion")
    g1 = UserGraph(6, [(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (0, 5), (1, 4)])
    g2 = UserGraph(5, [(0, 1), (1, 2), (2, 3), (3, 4), (0, 2)])
    d = 3
    prob = FusionProblem(
        rng.standard_normal((6, d)),
        rng.standard_normal((5, d)),
        normalized_adjacency(g1),
        normalized_adjacency(g2),
        np.array([[0, 1], [3, 4], [5, 0]]),
    )
    p = FusionParams.init(d, FusionConfig(k=3, alpha=1.5, out_dim=2, mode=mode, activation="identity"), rng)
    pos1, pos2 = positive_pairs(g1), positive_pairs(g2)
    neg1 = NegativeSampler(g1.degrees()).sample(len(pos1), 2, rng)
    neg2 = NegativeSampler(g2.degrees()).sample(len(pos2), 2, rng)
    flat = {k: v.copy() for k, v in p.arrays().items()}
    _, grads, _ = total_loss_and_grads(prob, p.with_arrays(flat), pos1, neg1, pos2, neg2)

    def f():
        return total_loss_and_grads(prob, p.with_arrays(flat), pos1, neg1, pos2, neg2)[0]

    num = numeric_grad(f, flat)
    return max(rel_error(num[k], grads[k]) for k in flat)


def power_oracle_error(seed: int, n: int = 10, k: int = 4) -> float:
    """Largest gap between the one-hop-at-a-time powers and dense ``A_hat^l Z'``."""
    rng = substream(seed, "verify-power")
    iu, ju = np.triu_indices(n, 1)
    keep = rng.random(len(iu)) < 0.35
    g = UserGraph(n, list(zip(iu[keep].tolist(), ju[keep].tolist())))
    A = normalized_adjacency(g)
    Z = rng.standard_normal((n, 4))
    blocks = hierarchy_features(A, np.zeros(n), Z, 0.0, k)
    dense = A.toarray()
    return max(float(np.abs(blocks[l] - np.linalg.matrix_power(dense, l) @ Z).max()) for l in range(1, k + 1))


def run_checks(restarts: int = 10) -> list[CheckResult]:
    results = []
    worst = mdp_ratio_check()
    results.append(CheckResult("mdp-ratio", worst <= 1e-9, f"max excess log-ratio {worst:.3e}"))
    z = pm_bias_check()
    results.append(CheckResult("pm-unbiased", z <= 4.0, f"max |mean - t| / SE = {z:.2f}"))
    e = max(encoder_gradient_error(s) for s in range(restarts))
    results.append(CheckResult("encoder-gradient", e <= 1e-4, f"max relative error {e:.2e}"))
    e = max(max(fusion_gradient_error(s, m) for m in ("hierarchy", "iterative")) for s in range(restarts))
    results.append(CheckResult("fusion-gradient", e <= 1e-4, f"max relative error {e:.2e}"))
    e = max(power_oracle_error(s) for s in range(restarts))
    results.append(CheckResult("power-oracle", e <= 1e-10, f"max abs error {e:.2e}"))
    return results
