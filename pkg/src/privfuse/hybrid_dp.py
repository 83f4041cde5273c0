"""Hybrid differential-privacy sanitizer for heterogeneous social graphs.

Three independent mechanisms, one per data type:

* user attributes: Piecewise Mechanism for numeric slots, k-ary randomized
  response for categorical slots, budget split evenly over slots;
* friendship edges: TmF, a noisy edge count followed by a per-cell Laplace
  threshold filter, sampled without touching the O(n^2) empty cells;
* post text: metric-DP word substitution with
  ``Pr[M(x) = y] ~ exp(-eps/2 * ||phi(x) - phi(y)||)``.

The whole graph then satisfies ``eps_a + eps_g + eps_t * d(G_t, G_t')``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.special import logsumexp

from .embeddings import WordEmbeddingTable
from .graph import AttributeTable, AttributeVector, GraphError, HeteroGraph, Slot, UserGraph
from .rng import substream

MECHANISM_VERSION = {"attributes": "pm+rr/1", "edges": "tmf/1", "text": "mdp-euclid/1"}
DATA_TYPES = ("attribute", "friendship", "posts")


@dataclass(frozen=True)
class PrivacyBudget:
    eps_a: float = 5.0
    eps_g: float = 10.0
    eps_t: float = 7.5

    def __post_init__(self):
        for name in ("eps_a", "eps_g", "eps_t"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be a positive finite number, got {v!r}")
            object.__setattr__(self, name, float(v))

    def total(self, text_distance: float) -> float:
        """Hybrid guarantee for neighbours whose posts differ by ``text_distance``."""
        return self.eps_a + self.eps_g + self.eps_t * text_distance


# ---------------------------------------------------------------------------
# attributes


def pm_bound(eps: float) -> float:
    """Output bound C = (e^{eps/2} + 1) / (e^{eps/2} - 1) of the Piecewise Mechanism."""
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    return 1.0 + 2.0 / math.expm1(eps / 2.0) if eps < 1400 else 1.0


def piecewise_mechanism(t, eps: float, rng: np.random.Generator) -> np.ndarray:
    """Perturb values in [-1, 1]; the output is unbiased and lies in [-C, C]."""
    t = np.asarray(t, dtype=float)
    if np.any(np.abs(t) > 1.0) or not np.all(np.isfinite(t)):
        raise ValueError("Piecewise Mechanism inputs must lie in [-1, 1]")
    C = pm_bound(eps)
    p_in = 1.0 / (1.0 + math.exp(-eps / 2.0))
    left = (C + 1.0) / 2.0 * t - (C - 1.0) / 2.0
    right = left + C - 1.0
    u = rng.random(t.shape)
    v = rng.random(t.shape)
    inside = left + v * (C - 1.0)
    # outer pieces [-C, left) and (right, C] have total length C + 1
    w = v * (C + 1.0)
    outside = np.where(w < left + C, -C + w, right + (w - (left + C)))
    return np.where(u < p_in, inside, outside)


def rr_keep_probability(eps: float, cardinality: int) -> float:
    """Probability that k-ary randomized response reports the true category."""
    if cardinality < 1:
        raise ValueError("cardinality must be at least 1")
    if eps < 0:
        raise ValueError("eps must be non-negative")
    return 1.0 / (1.0 + (cardinality - 1) * math.exp(-eps))


def rr_transition_matrix(eps: float, cardinality: int) -> np.ndarray:
    """``P[i, j] = Pr[report j | true i]``."""
    keep = rr_keep_probability(eps, cardinality)
    if cardinality == 1:
        return np.ones((1, 1))
    other = math.exp(-eps) * keep  # avoids the cancellation in (1 - keep) / (c - 1)
    P = np.full((cardinality, cardinality), other)
    np.fill_diagonal(P, keep)
    return P


def randomized_response(index: int, cardinality: int, eps: float, rng: np.random.Generator) -> int:
    if not 0 <= index < cardinality:
        raise ValueError(f"category {index} outside cardinality {cardinality}")
    u, k = rng.random(), int(rng.integers(max(cardinality - 1, 1)))
    if cardinality == 1 or u < rr_keep_probability(eps, cardinality):
        return int(index)
    return k if k < index else k + 1


def perturb_attributes(x: AttributeVector, eps_a: float, rng: np.random.Generator) -> AttributeVector:
    """Perturb every slot independently with ``eps_a / m`` (m = number of slots).

    Numeric slots come back in ``[-C, C]`` for the per-slot budget.
    """
    if not eps_a > 0:
        raise ValueError(f"eps_a must be positive, got {eps_a}")
    x.check_unit_range()
    m = x.n_slots
    if m == 0:
        return x
    eps = eps_a / m
    numeric = piecewise_mechanism(x.numeric, eps, rng)
    cat = np.array(
        [randomized_response(int(i), c, eps, rng) for i, c in zip(x.categorical, x.cardinalities)],
        dtype=np.int64,
    )
    return AttributeVector(numeric, cat, x.cardinalities)


def _sanitize_attributes(table: AttributeTable, eps_a: float, seed: int) -> tuple[AttributeTable, dict]:
    n = table.numeric.shape[0]
    m = len(table.schema)
    if m == 0:
        return table, {"slots": 0}
    C = pm_bound(eps_a / m)
    num = np.empty_like(table.numeric)
    cat = np.empty_like(table.categorical)
    for i in range(n):
        out = perturb_attributes(table.row(i), eps_a, substream(seed, "attr", i))
        num[i] = out.numeric / C
        cat[i] = out.categorical
    # rescaling by the data-independent bound C is post-processing
    schema = tuple(Slot(s.name, s.kind, s.cardinality, -C, C) if s.kind == "num" else s for s in table.schema)
    return AttributeTable(schema, num, cat), {"slots": m, "eps_per_slot": eps_a / m, "pm_bound": C}


# ---------------------------------------------------------------------------
# edges (TmF)


@dataclass(frozen=True)
class TmfReport:
    n: int
    m: int
    m_hat: int
    theta: float
    p_keep: float  # Pr[1 + Lap > theta]
    p_add: float  # Pr[Lap > theta]
    eps_count: float
    eps_filter: float
    expected_edges: float
    kept: int
    added: int


def laplace_sf(x, scale: float):
    """Pr[Lap(scale) > x]."""
    x = np.asarray(x, dtype=float)
    with np.errstate(over="ignore"):
        return np.where(x >= 0, 0.5 * np.exp(-np.abs(x) / scale), 1.0 - 0.5 * np.exp(-np.abs(x) / scale))


def expected_edge_count(theta: float, n_cells: int, m: int, scale: float) -> float:
    return float(m * laplace_sf(theta - 1.0, scale) + (n_cells - m) * laplace_sf(theta, scale))


def solve_threshold(n_cells: int, m: int, m_hat: float, scale: float, tol: float = 1e-6) -> float:
    """Bisection for theta with expected_edge_count(theta) == m_hat."""
    if m_hat <= 0:
        return math.inf
    if m_hat >= n_cells:
        return -math.inf

    def f(th):
        return expected_edge_count(th, n_cells, m, scale) - m_hat

    lo, hi = -1.0, 2.0
    while f(lo) < 0:
        lo = 2.0 * lo - 1.0
    while f(hi) > 0:
        hi = 2.0 * hi + 1.0
    for _ in range(400):
        mid = 0.5 * (lo + hi)
        val = f(mid)
        if abs(val) <= tol or mid in (lo, hi):
            return mid
        if val > 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _row_starts(n: int) -> np.ndarray:
    i = np.arange(n, dtype=np.int64)
    return i * n - i * (i + 1) // 2


def cells_to_pairs(cells: np.ndarray, n: int) -> np.ndarray:
    """Decode row-major upper-triangle cell indices into (i, j) pairs with i < j."""
    starts = _row_starts(n)
    i = np.searchsorted(starts, cells, side="right") - 1
    j = cells - starts[i] + i + 1
    return np.column_stack([i, j]).astype(np.int64)


def pairs_to_cells(pairs: np.ndarray, n: int) -> np.ndarray:
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    i, j = pairs[:, 0], pairs[:, 1]
    return _row_starts(n)[i] + (j - i - 1)


def geometric_skip(n_cells: int, p: float, rng: np.random.Generator) -> np.ndarray:
    """Indices in ``[0, n_cells)`` each chosen independently with probability ``p``.

    Walks the index space by geometric gaps, so cost is proportional to the
    number of selected cells rather than ``n_cells``.
    """
    if p <= 0.0 or n_cells <= 0:
        return np.zeros(0, dtype=np.int64)
    if p >= 1.0:
        return np.arange(n_cells, dtype=np.int64)
    log_q = math.log1p(-p)
    expected = n_cells * p
    chunk = int(expected + 6.0 * math.sqrt(expected) + 32)
    out = []
    pos = -1
    while True:
        u = rng.random(chunk)
        # inverse-CDF geometric on {1, 2, ...}; clipped before the integer cast
        gaps = np.floor(np.log1p(-u) / log_q) + 1.0
        gaps = np.minimum(gaps, float(n_cells + 1)).astype(np.int64)
        idx = pos + np.cumsum(gaps)
        keep = idx[idx < n_cells]
        out.append(keep)
        if len(keep) < chunk:
            break
        pos = int(idx[-1])
    return np.concatenate(out)


def _tmf(g: UserGraph, eps_g: float, rng: np.random.Generator, count_share: float = 0.1) -> tuple[UserGraph, TmfReport]:
    if not eps_g > 0:
        raise ValueError(f"eps_g must be positive, got {eps_g}")
    n, m = g.n, g.m
    n_cells = n * (n - 1) // 2
    eps_count = count_share * eps_g
    eps_filter = eps_g - eps_count
    scale = 1.0 / eps_filter
    m_hat = int(np.clip(round(m + rng.laplace(0.0, 1.0 / eps_count)), 0, n_cells))
    theta = solve_threshold(n_cells, m, m_hat, scale)
    if math.isinf(theta):
        p_keep = p_add = 0.0 if theta > 0 else 1.0
    else:
        p_keep = float(laplace_sf(theta - 1.0, scale))
        p_add = float(laplace_sf(theta, scale))

    noisy = 1.0 + rng.laplace(0.0, scale, size=m)
    kept = g.edges[noisy > theta]
    cells = geometric_skip(n_cells, p_add, rng)
    if m and len(cells):
        cells = cells[~np.isin(cells, pairs_to_cells(g.edges, n))]
    added = cells_to_pairs(cells, n) if len(cells) else np.zeros((0, 2), dtype=np.int64)
    out = UserGraph(n, np.vstack([kept, added]))
    report = TmfReport(
        n=n,
        m=m,
        m_hat=m_hat,
        theta=float(theta),
        p_keep=p_keep,
        p_add=p_add,
        eps_count=eps_count,
        eps_filter=eps_filter,
        expected_edges=expected_edge_count(theta, n_cells, m, scale) if math.isfinite(theta) else float(m_hat),
        kept=len(kept),
        added=len(added),
    )
    return out, report


def perturb_edges(g: UserGraph, eps_g: float, rng: np.random.Generator) -> UserGraph:
    """TmF with 10% of ``eps_g`` on the edge count and 90% on the cell filter."""
    return _tmf(g, eps_g, rng)[0]


# ---------------------------------------------------------------------------
# text


def mdp_probabilities(vectors: np.ndarray, eps: float) -> np.ndarray:
    """Full substitution matrix ``P[x, y] = Pr[M(x) = y]``."""
    vectors = np.asarray(vectors, dtype=float)
    if eps < 0:
        raise ValueError("eps must be non-negative")
    dist = np.linalg.norm(vectors[:, None, :] - vectors[None, :, :], axis=-1)
    logits = -0.5 * eps * dist
    return np.exp(logits - logsumexp(logits, axis=1, keepdims=True))


class TextSanitizer:
    """Samples word substitutes; per-word CDFs are built lazily and cached."""

    def __init__(self, emb: WordEmbeddingTable, eps: float):
        if len(emb) == 0:
            raise ValueError("word embedding table is empty")
        if not eps > 0:
            raise ValueError(f"eps_t must be positive, got {eps}")
        self.emb = emb
        self.eps = float(eps)
        self._index = emb.index()
        self._cdf: dict[int, np.ndarray] = {}
        self.oov = 0

    def probabilities(self, word_index: int) -> np.ndarray:
        dist = np.linalg.norm(self.emb.vectors - self.emb.vectors[word_index], axis=1)
        logits = -0.5 * self.eps * dist
        return np.exp(logits - logsumexp(logits))

    def _row(self, word_index: int) -> np.ndarray:
        cdf = self._cdf.get(word_index)
        if cdf is None:
            cdf = np.cumsum(self.probabilities(word_index))
            self._cdf[word_index] = cdf
        return cdf

    def sample(self, word: str, rng: np.random.Generator) -> str:
        u = rng.random()
        V = len(self.emb)
        idx = self._index.get(word)
        if idx is None:
            self.oov += 1
            return self.emb.ids[min(int(u * V), V - 1)]
        cdf = self._row(idx)
        k = int(np.searchsorted(cdf, u * cdf[-1], side="right"))
        return self.emb.ids[min(k, V - 1)]

    def sanitize(self, tokens: Sequence[str], rng: np.random.Generator) -> list[str]:
        return [self.sample(tok, rng) for tok in tokens]

    def diameter(self) -> float:
        """Largest pairwise distance in the vocabulary (worst-case per-token d)."""
        v = self.emb.vectors
        if len(v) > 4096:
            warnings.warn("vocabulary diameter estimated from the first 4096 words")
            v = v[:4096]
        return float(np.max(np.linalg.norm(v[:, None, :] - v[None, :, :], axis=-1)))


def sanitize_text(tokens: Sequence[str], eps_t: float, emb: WordEmbeddingTable, rng: np.random.Generator) -> list[str]:
    return TextSanitizer(emb, eps_t).sanitize(tokens, rng)


# ---------------------------------------------------------------------------
# whole graph


def sanitize_graph(g: HeteroGraph, b: PrivacyBudget, emb: WordEmbeddingTable, seed: int) -> HeteroGraph:
    """Apply the three mechanisms independently; ids, write edges and labels pass through.

    The returned graph's ``meta["sanitizer"]`` records budgets, seed and
    mechanism diagnostics.
    """
    attrs, attr_diag = _sanitize_attributes(g.attrs, b.eps_a, seed)
    ug, tmf = _tmf(UserGraph(g.n_users, g.friendship), b.eps_g, substream(seed, "edges"))
    san = TextSanitizer(emb, b.eps_t)
    texts = tuple(tuple(san.sanitize(toks, substream(seed, "text", j))) for j, toks in enumerate(g.post_text))
    meta = dict(g.meta)
    meta["sanitizer"] = {
        "seed": int(seed),
        "versions": dict(MECHANISM_VERSION),
        "budget": asdict(b),
        "consumed": {"eps_a": b.eps_a, "eps_g": b.eps_g, "eps_t": b.eps_t},
        "attribute": attr_diag,
        "edges": asdict(tmf),
        "text": {"vocabulary": len(emb), "oov_tokens": san.oov, "max_token_distance": san.diameter()},
        "source_digest": g.content_digest(),
    }
    return g.replace(attrs=attrs, friendship=ug.edges, post_text=texts, meta=meta)


# ---------------------------------------------------------------------------
# budget allocation


@dataclass(frozen=True)
class TmrRow:
    task: float
    gender: float
    occupation: float
    tmr: float


@dataclass(frozen=True)
class TmrReport:
    rows: dict = field(default_factory=dict)  # data type -> TmrRow

    def __getitem__(self, key: str) -> TmrRow:
        return self.rows[key]

    def values(self) -> dict[str, float]:
        return {k: r.tmr for k, r in self.rows.items()}


def compute_tmr(
    task_precisions: Mapping[str, float],
    gender_precisions: Mapping[str, float],
    occupation_precisions: Mapping[str, float],
) -> TmrReport:
    """TMR per data type: task precision over summed attack precisions."""
    rows = {}
    for key in task_precisions:
        t, g, o = task_precisions[key], gender_precisions[key], occupation_precisions[key]
        for v in (t, g, o):
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"precision {v} for {key!r} outside [0, 1]")
        if g + o <= 0:
            raise ZeroDivisionError(f"attack precisions for {key!r} sum to zero")
        rows[key] = TmrRow(t, g, o, t / (g + o))
    return TmrReport(rows)


def allocate_budgets(tmr: TmrReport | Mapping[str, float], total: float) -> PrivacyBudget:
    """Split ``total`` across (attribute, friendship, posts) proportionally to TMR."""
    if not total > 0:
        raise ValueError(f"total budget must be positive, got {total}")
    vals = tmr.values() if isinstance(tmr, TmrReport) else dict(tmr)
    t = [float(vals[k]) for k in DATA_TYPES]
    if any(v <= 0 for v in t):
        raise ValueError("TMR values must be positive")
    s = sum(t)
    return PrivacyBudget(total * t[0] / s, total * t[1] / s, total * t[2] / s)


def check_graph_budget(g: HeteroGraph) -> PrivacyBudget:
    """Budget recorded by the sanitizer on ``g``; raises if absent."""
    rec = g.meta.get("sanitizer")
    if rec is None:
        raise GraphError("graph carries no sanitizer provenance")
    return PrivacyBudget(**rec["consumed"])
