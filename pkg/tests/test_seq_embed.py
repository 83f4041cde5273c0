import numpy as np
import pytest

from privfuse.embeddings import (
    EmbeddingFormatError,
    EmbeddingTable,
    load_checkpoint,
    load_embeddings,
    read_header,
    save_checkpoint,
    save_embeddings,
)
from privfuse.graph import UserGraph
from privfuse.seq_embed import SkipGramConfig, WalkConfig, deepwalk, random_walks, skipgram_loss, train_skipgram
from privfuse.verify import numeric_grad, rel_error


def cos(u, v):
    return u @ v / (np.linalg.norm(u) * np.linalg.norm(v))


def test_single_token_corpus():
    t = train_skipgram([["x"] * 5], SkipGramConfig(dim=4))
    assert t.ids == ("x",) and np.all(np.isfinite(t.vectors))


def test_empty_corpus_rejected():
    with pytest.raises(ValueError):
        train_skipgram([[], []])
    with pytest.raises(ValueError):
        train_skipgram([["a"]], SkipGramConfig(min_count=2))


def test_cooccurrence_classes():
    rng = np.random.default_rng(0)
    corpus = [list(rng.choice(["a1", "a2"], 10)) if i % 2 else list(rng.choice(["b1", "b2"], 10)) for i in range(400)]
    t = train_skipgram(corpus, SkipGramConfig(dim=8, window=2, epochs=5, seed=1))
    a1, a2, b1 = (t.phi(w) for w in ("a1", "a2", "b1"))
    assert cos(a1, a2) > cos(a1, b1)


def test_skipgram_deterministic():
    corpus = [["a", "b", "c", "a"], ["c", "d"]] * 10
    cfg = SkipGramConfig(dim=5, seed=4)
    t1, t2 = train_skipgram(corpus, cfg), train_skipgram(corpus, cfg)
    assert t1.ids == t2.ids
    np.testing.assert_array_equal(t1.vectors, t2.vectors)


@pytest.mark.parametrize("point", range(10))
def test_skipgram_gradient(point):
    rng = np.random.default_rng(point)
    V, d = 6, 4
    arrays = {"in": rng.normal(size=(V, d)), "out": rng.normal(size=(V, d))}
    c, x = rng.integers(0, V, 5), rng.integers(0, V, 5)
    negs = rng.integers(0, V, (5, 3))
    _, g_in, g_out = skipgram_loss(arrays["in"], arrays["out"], c, x, negs)
    num = numeric_grad(lambda: skipgram_loss(arrays["in"], arrays["out"], c, x, negs)[0], arrays)
    assert rel_error(num["in"], g_in) <= 1e-4
    assert rel_error(num["out"], g_out) <= 1e-4


def test_walk_from_isolated_node():
    walks = random_walks(UserGraph(3, [(0, 1)]), WalkConfig(walks_per_node=2, walk_length=5))
    assert [2] in walks
    assert all(len(w) == 5 for w in walks if w[0] != 2)


def test_walks_follow_edges():
    g = UserGraph(3, [(0, 1), (1, 2)])
    walks = random_walks(g, WalkConfig(walks_per_node=20, walk_length=3, seed=2))
    edges = g.edge_set()
    for w in walks:
        assert set(w) <= {0, 1, 2}
        assert all((min(a, b), max(a, b)) in edges for a, b in zip(w, w[1:]))


def test_walk_count():
    rng = np.random.default_rng(0)
    iu, ju = np.triu_indices(100, 1)
    keep = rng.random(len(iu)) < 0.05
    walks = random_walks(UserGraph(100, np.column_stack([iu[keep], ju[keep]])), WalkConfig(walks_per_node=10))
    assert len(walks) == 1000


def test_deepwalk_rows_follow_ids():
    g = UserGraph(4, [(0, 1), (2, 3)])
    t = deepwalk(g, ["w", "x", "y", "z"], WalkConfig(walks_per_node=5, walk_length=6), SkipGramConfig(dim=3, epochs=2))
    assert t.ids == ("w", "x", "y", "z") and t.dim == 3
    assert np.all(np.isfinite(t.vectors))


def test_embedding_file_round_trip(tmp_path):
    t = EmbeddingTable(("a", "b"), np.array([[0.1, -2.5], [1e-300, 3.0]]))
    save_embeddings(t, tmp_path / "e.txt", {"k": 1})
    u = load_embeddings(tmp_path / "e.txt")
    assert u.ids == t.ids and read_header(tmp_path / "e.txt") == {"k": 1}
    np.testing.assert_array_equal(u.vectors, t.vectors)
    assert (tmp_path / "e.txt").read_text().splitlines()[1] == "2 2"


@pytest.mark.parametrize(
    "body,line",
    [("2 2\na 1 2\nb 1\n", 3), ("2 2\na 1 2\nb 1 x\n", 3), ("x\n", 1), ("3 1\na 1\n", 2), ("1 1\na nan\n", 2)],
)
def test_embedding_file_errors_name_line(tmp_path, body, line):
    p = tmp_path / "bad.txt"
    p.write_text(body)
    with pytest.raises(EmbeddingFormatError) as err:
        load_embeddings(p)
    assert err.value.lineno == line and str(p) in str(err.value)


def test_checkpoint_round_trip(tmp_path):
    arrays = {"W": np.arange(6.0).reshape(2, 3), "b": np.array([0.5])}
    save_checkpoint(tmp_path / "c.pfck", arrays, {"seed": 3})
    got, head = load_checkpoint(tmp_path / "c.pfck")
    assert head == {"seed": 3}
    for k in arrays:
        np.testing.assert_array_equal(got[k], arrays[k])
    assert (tmp_path / "c.pfck").read_bytes()[:4] == b"PFCK"
