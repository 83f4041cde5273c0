"""Synthetic social graphs with planted structure, for tests and bundled fixtures."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graph import HeteroGraph, parse_records
from .rng import substream

VOCAB_SIZE = 60
N_EXTRA = 3  # fixture interests beyond the group label


def vocabulary(size: int = VOCAB_SIZE) -> list[str]:
    return [f"w{i:03d}" for i in range(size)]


def planted_rotation(n: int, d: int, seed: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gaussian cloud ``Z1``, random orthogonal ``R`` and ``Z2 = Z1 @ R.T``."""
    rng = substream(seed, "planted-rotation")
    Z1 = rng.standard_normal((n, d))
    Q, Rr = np.linalg.qr(rng.standard_normal((d, d)))
    R = Q * np.sign(np.diag(Rr))
    return Z1, Z1 @ R.T, R


def _sbm_edges(groups: np.ndarray, p_in: float, p_out: float, rng) -> list[tuple[int, int]]:
    n = len(groups)
    iu, ju = np.triu_indices(n, k=1)
    p = np.where(groups[iu] == groups[ju], p_in, p_out)
    keep = rng.random(len(iu)) < p
    return list(zip(iu[keep].tolist(), ju[keep].tolist()))


def _posts(rng, n_users: int, topic: np.ndarray | None, n_topics: int, per_user: int, length: int, vocab: list[str]):
    """Posts drawn from a per-topic word slice mixed with uniform noise words."""
    out = []
    V = len(vocab)
    width = V // max(n_topics, 1)
    for u in range(n_users):
        for k in range(per_user):
            if topic is None:
                idx = rng.integers(0, V, length)
            else:
                own = topic[u] * width + rng.integers(0, width, length)
                idx = np.where(rng.random(length) < 0.7, own, rng.integers(0, V, length))
            out.append((u, " ".join(vocab[i] for i in idx)))
    return out


def _records(ids, attrs, gender, occupation, interests, edges, posts, prefix):
    recs = []
    for i, uid in enumerate(ids):
        recs.append(
            {
                "kind": "user",
                "id": uid,
                "attrs": attrs[i],
                "gender": None if gender is None else int(gender[i]),
                "occupation": None if occupation is None else int(occupation[i]),
                "interests": None if interests is None else list(interests[i]),
            }
        )
    for j, (u, text) in enumerate(posts):
        recs.append({"kind": "post", "id": f"{prefix}p{j}", "author": ids[u], "text": text})
    for a, b in edges:
        recs.append({"kind": "friend", "a": ids[a], "b": ids[b]})
    return recs


def _build(recs) -> HeteroGraph:
    return parse_records(enumerate(recs, start=1))


@dataclass(frozen=True)
class CrossNetworkPair:
    a: HeteroGraph
    b: HeteroGraph
    anchors: tuple[tuple[str, str], ...]  # planted (id in a, id in b)
    interests: dict[str, tuple[int, ...]]  # labels of a's users


def cross_network_pair(
    n: int = 300,
    anchor_fraction: float = 0.5,
    n_groups: int = 4,
    seed: int = 0,
    degree_a: float = 8.0,
    degree_b: float = 8.0,
    homophily_b: float = 0.9,
) -> CrossNetworkPair:
    """Two networks of ``n`` users; a's labels are visible only through b's structure.

    Every user of ``a`` has a latent group, which is also its interest label.
    Network ``a`` is an Erdos-Renyi graph with uninformative attributes and
    posts. Network ``b`` is a stochastic block model over the same groups, so
    anchor users carry their group into ``b``'s embedding.
    """
    if not 0.0 <= anchor_fraction <= 1.0:
        raise ValueError("anchor_fraction must be in [0, 1]")
    rng = substream(seed, "cross-network")
    vocab = vocabulary()
    group_a = rng.integers(0, n_groups, n)
    n_anchor = int(round(anchor_fraction * n))
    shared = rng.permutation(n)[:n_anchor]  # users of a that also live in b
    b_slot = rng.permutation(n)[:n_anchor]  # their positions in b
    group_b = rng.integers(0, n_groups, n)
    group_b[b_slot] = group_a[shared]

    ids_a = [f"a{i:04d}" for i in range(n)]
    ids_b = [f"b{i:04d}" for i in range(n)]
    p_a = degree_a / (n - 1)
    edges_a = _sbm_edges(group_a, p_a, p_a, rng)
    # b: mean degree ``degree_b`` with a fraction ``homophily_b`` of edges inside groups
    share = 1.0 / n_groups
    p_in = homophily_b * degree_b / (share * (n - 1))
    p_out = (1.0 - homophily_b) * degree_b / ((1.0 - share) * (n - 1))
    edges_b = _sbm_edges(group_b, min(p_in, 1.0), p_out, rng)

    def attrs(k):
        return [{"age": float(rng.integers(15, 70)), "city": {"cat": int(rng.integers(0, 5)), "n": 5}} for _ in range(k)]

    interests = [(int(c),) for c in group_a]
    ga = _build(
        _records(ids_a, attrs(n), None, None, interests, edges_a, _posts(rng, n, None, 1, 2, 8, vocab), "a")
    )
    gb = _build(
        _records(ids_b, attrs(n), None, None, None, edges_b, _posts(rng, n, group_b, n_groups, 2, 8, vocab), "b")
    )
    anchors = tuple(sorted((ids_a[i], ids_b[j]) for i, j in zip(shared, b_slot)))
    return CrossNetworkPair(ga, gb, anchors, {u: lab for u, lab in zip(ids_a, interests)})


def gender_planted_graph(n: int = 300, seed: int = 0, degree: float = 8.0, n_slots: int = 6) -> HeteroGraph:
    """Gender is written verbatim into one categorical slot; nothing else depends on it."""
    rng = substream(seed, "gender-planted")
    vocab = vocabulary()
    gender = rng.integers(0, 2, n)
    occupation = rng.integers(0, 4, n)
    ids = [f"u{i:04d}" for i in range(n)]
    attrs = []
    for i in range(n):
        row = {"sex": {"cat": int(gender[i]), "n": 2}}
        for s in range(n_slots - 1):
            row[f"x{s}"] = float(rng.normal())
        attrs.append(row)
    p = degree / (n - 1)
    edges = _sbm_edges(np.zeros(n, dtype=np.int64), p, p, rng)
    posts = _posts(rng, n, None, 1, 2, 8, vocab)
    interests = [tuple(sorted(set(rng.integers(0, 4, 2).tolist()))) for _ in range(n)]
    return _build(_records(ids, attrs, gender, occupation, interests, edges, posts, "g"))


def fixture_pair(n: int = 200, seed: int = 7) -> tuple[list[dict], list[dict]]:
    """Record lists for the bundled end-to-end fixtures (two networks, half shared users).

    Users carry a screen name, an age, a city and a gender slot, plus gender,
    occupation and interest labels. Shared users keep their group in both
    networks and the same screen name.
    """
    rng = substream(seed, "fixtures")
    vocab = vocabulary()
    n_groups = 4
    group = rng.integers(0, n_groups, n)
    gender = rng.integers(0, 2, n)
    occupation = rng.integers(0, 4, n)
    interests = [tuple(sorted({int(g), int(rng.integers(0, N_EXTRA)) + n_groups})) for g in group]
    shared = set(rng.permutation(n)[: n // 2].tolist())

    def network(tag: str, perm: np.ndarray, homophily: float):
        ids = [f"{tag}{i:04d}" for i in range(n)]
        # user slot k of this network holds person perm[k]; non-shared people are fresh
        person = perm
        grp = np.array([group[p] if p in shared else rng.integers(0, n_groups) for p in person])
        share = 1.0 / n_groups
        p_in = homophily * 8.0 / (share * (n - 1))
        p_out = (1.0 - homophily) * 8.0 / ((1.0 - share) * (n - 1))
        edges = _sbm_edges(grp, min(p_in, 1.0), p_out, rng)
        attrs = []
        for k, p in enumerate(person):
            name = f"user{p:04d}" if p in shared else f"{tag}x{k:04d}"
            attrs.append(
                {
                    "name": name,
                    "age": float(rng.integers(15, 70)),
                    "city": {"cat": int(rng.integers(0, 5)), "n": 5},
                    "sex": {"cat": int(gender[p]), "n": 2},
                }
            )
        posts = _posts(rng, n, grp, n_groups, 2, 8, vocab)
        g_lab = [int(gender[p]) for p in person]
        o_lab = [int(occupation[p]) for p in person]
        i_lab = [interests[p] if p in shared else (int(grp[k]),) for k, p in enumerate(person)]
        return _records(ids, attrs, g_lab, o_lab, i_lab, edges, posts, tag)

    recs_a = network("a", np.arange(n), 0.8)
    recs_b = network("b", rng.permutation(n), 0.8)
    return recs_a, recs_b



def write_fixtures(directory, n: int = 200, seed: int = 7) -> None:
    """Write ``a.jsonl``, ``b.jsonl`` and a ``pipeline.cfg`` pointing at them."""
    import json
    from pathlib import Path

    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for name, recs in zip(("a", "b"), fixture_pair(n, seed)):
        with open(d / f"{name}.jsonl", "w", encoding="utf-8") as fh:
            for r in recs:
                fh.write(json.dumps(r, separators=(",", ":")) + "\n")
    (d / "pipeline.cfg").write_text(
        "# bundled 200-user fixtures\ngraph_a = a.jsonl\ngraph_b = b.jsonl\nseed = 0\n", encoding="utf-8"
    )
