import warnings

import numpy as np
import pytest
from scipy import sparse

from privfuse.align import AnchorSet
from privfuse.embeddings import EmbeddingTable
from privfuse.fuse import (
    FusionConfig,
    FusionParams,
    FusionProblem,
    alignment_penalty,
    anchor_mask,
    fit_fusion,
    forward,
    hierarchy_features,
    hierarchy_propagate,
    inter_propagate,
    normalized_adjacency,
    total_loss,
)
from privfuse.graph import UserGraph
from privfuse.hetero_embed import TrainConfig
from privfuse.rng import substream
from privfuse.verify import fusion_gradient_error, power_oracle_error


def params(d, out=None, **kw):
    cfg = FusionConfig(out_dim=out or d, **kw)
    return FusionParams.init(d, cfg, np.random.default_rng(0))


def table(Z, prefix):
    return EmbeddingTable(tuple(f"{prefix}{i}" for i in range(len(Z))), Z)


def ring(n, chords=()):
    return UserGraph(n, [(i, (i + 1) % n) if i < n - 1 else (0, n - 1) for i in range(n)] + list(chords))


def test_zero_maps_leave_anchor_unchanged():
    p = params(3, inter_activation="identity")
    p.W12[:] = 0
    p.W21[:] = 0
    z1, z2 = np.array([1.0, -2.0, 0.5]), np.array([0.3, 0.0, -1.0])
    a, b = inter_propagate(z1, z2, p)
    np.testing.assert_array_equal(a, z1)
    np.testing.assert_array_equal(b, z2)


def test_symmetric_inputs_stay_symmetric():
    p = params(4)
    p.W12[:] = p.W21
    z = np.random.default_rng(1).normal(size=4)
    a, b = inter_propagate(z, z, p)
    np.testing.assert_array_equal(a, b)


def test_inter_propagate_by_hand():
    p = params(2, inter_activation="identity")
    p.W21[:] = np.eye(2)
    a, _ = inter_propagate(np.array([1.0, 0.0]), np.array([0.0, 1.0]), p)
    np.testing.assert_allclose(a, [1.0, 1.0])


def test_inter_propagate_mismatch():
    with pytest.raises(ValueError):
        inter_propagate(np.ones(3), np.ones(2), params(3))


def test_degenerate_reduction_is_one_hop():
    g = ring(5, [(0, 2)])
    A = normalized_adjacency(g)
    Z = np.random.default_rng(2).normal(size=(5, 3))
    p = params(3, k=1, alpha=0.0)
    Wu = np.vstack([np.zeros((3, 3)), np.eye(3)])
    out = hierarchy_propagate(A, anchor_mask(5, [1]), Z, p, Wu)
    np.testing.assert_allclose(out, A @ Z, atol=1e-14)


def test_edgeless_graph_keeps_only_anchor_rows():
    A = normalized_adjacency(UserGraph(4, []))
    Z = np.arange(12.0).reshape(4, 3)
    mask = anchor_mask(4, [1, 3])
    for H in hierarchy_features(A, mask, Z, 1.0, 2)[1:]:
        np.testing.assert_array_equal(H[[1, 3]], Z[[1, 3]])  # alpha = 1
        np.testing.assert_array_equal(H[[0, 2]], 0)


def test_path_graph_two_hops():
    A = normalized_adjacency(UserGraph(3, [(0, 1), (1, 2)]))
    s = 1 / np.sqrt(2)
    dense = np.array([[0, s, 0], [s, 0, s], [0, s, 0]])
    np.testing.assert_allclose(A.toarray(), dense, atol=1e-15)
    H2 = hierarchy_features(A, np.zeros(3), np.eye(3), 0.0, 2)[2]
    np.testing.assert_allclose(H2, [[0.5, 0, 0.5], [0, 1, 0], [0.5, 0, 0.5]], atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_power_oracle(seed):
    assert power_oracle_error(seed) <= 1e-10


def test_isolated_rows_are_zero():
    A = normalized_adjacency(UserGraph(3, [(0, 1)]))
    assert A[2].nnz == 0 and np.allclose(A.toarray(), A.toarray().T)


def test_anchor_emphasis_is_exact():
    g = ring(7, [(1, 4)])
    A = normalized_adjacency(g)
    Z = np.random.default_rng(3).normal(size=(7, 2))
    mask = anchor_mask(7, [0, 4])
    alpha = 2.0
    with_a = hierarchy_features(A, mask, Z, alpha, 4)
    without = hierarchy_features(A, mask, Z, 0.0, 4)
    for l in range(1, 5):
        diff = with_a[l] - without[l]
        # (alpha z + P) - P only differs from alpha z by rounding
        np.testing.assert_allclose(diff[[0, 4]], alpha * Z[[0, 4]], rtol=0, atol=4 * np.finfo(float).eps * np.abs(with_a[l]).max())
        assert np.all(diff[[1, 2, 3, 5, 6]] == 0)


def test_anchor_mask_checks_range():
    np.testing.assert_array_equal(anchor_mask(4, [0, 2]), [1, 0, 1, 0])
    with pytest.raises(ValueError):
        anchor_mask(3, [3])


def test_regularizer_examples():
    O1 = np.array([[1.0, 0.0]])
    O2 = np.array([[0.0, 1.0]])
    assert alignment_penalty(O1, O2, [[0, 0]])[0] == pytest.approx(2.0)
    assert alignment_penalty(O1, O1.copy(), [[0, 0]])[0] == 0.0


def test_total_loss_regularizer_term():
    g = UserGraph(2, [(0, 1)])
    O1 = np.array([[1.0, 0.0], [0.0, 0.0]])
    O2 = np.array([[0.0, 1.0], [0.0, 0.0]])
    cfg = TrainConfig(negatives=0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        without = total_loss(O1, O2, g, g, np.zeros((0, 2)), cfg)
    assert total_loss(O1, O2, g, g, [[0, 0]], cfg) - without == pytest.approx(2.0)


def test_no_edges_no_anchors_is_an_error():
    g = UserGraph(2, [])
    with pytest.warns(UserWarning, match="no anchors"), pytest.raises(ValueError):
        total_loss(np.zeros((2, 2)), np.zeros((2, 2)), g, g, np.zeros((0, 2)))


@pytest.mark.parametrize("mode", ["hierarchy", "iterative"])
@pytest.mark.parametrize("seed", range(2))
def test_fusion_gradients(mode, seed):
    assert fusion_gradient_error(seed, mode) <= 1e-4


def test_non_anchor_rows_untouched():
    rng = np.random.default_rng(4)
    Z1, Z2 = rng.normal(size=(6, 3)), rng.normal(size=(5, 3))
    g1, g2 = ring(6), ring(5)
    prob = FusionProblem(Z1, Z2, normalized_adjacency(g1), normalized_adjacency(g2), [[1, 0], [4, 3]])
    p = params(3, k=1, alpha=0.0, inter_activation="identity")
    # selector on the Z' block reads the inter-propagated embeddings back out
    p.Wu1[:] = np.vstack([np.eye(3), np.zeros((3, 3))])
    p.Wu2[:] = p.Wu1
    O1, O2, _ = forward(prob, p)
    np.testing.assert_array_equal(O1[[0, 2, 3, 5]], Z1[[0, 2, 3, 5]])
    np.testing.assert_array_equal(O2[[1, 2, 4]], Z2[[1, 2, 4]])
    assert not np.allclose(O1[1], Z1[1])


@pytest.mark.parametrize("mode", ["hierarchy", "iterative"])
def test_forward_permutation_equivariance(mode):
    rng = np.random.default_rng(5)
    n1, n2 = 7, 6
    e1 = [(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (5, 6), (0, 3)]
    e2 = [(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (1, 5)]
    Z1, Z2 = rng.normal(size=(n1, 3)), rng.normal(size=(n2, 3))
    pairs = np.array([[0, 2], [3, 5], [6, 0]])
    p = params(3, out=2, k=2, mode=mode)
    perm1, perm2 = rng.permutation(n1), rng.permutation(n2)

    def relabel(edges, perm):
        return UserGraph(len(perm), [(int(perm[a]), int(perm[b])) for a, b in edges])

    base = forward(FusionProblem(Z1, Z2, normalized_adjacency(UserGraph(n1, e1)), normalized_adjacency(UserGraph(n2, e2)), pairs), p)
    Z1p, Z2p = np.empty_like(Z1), np.empty_like(Z2)
    Z1p[perm1], Z2p[perm2] = Z1, Z2
    moved = forward(
        FusionProblem(
            Z1p,
            Z2p,
            normalized_adjacency(relabel(e1, perm1)),
            normalized_adjacency(relabel(e2, perm2)),
            np.column_stack([perm1[pairs[:, 0]], perm2[pairs[:, 1]]]),
        ),
        p,
    )
    np.testing.assert_allclose(moved[0][perm1], base[0], atol=1e-12)
    np.testing.assert_allclose(moved[1][perm2], base[1], atol=1e-12)


def test_problem_dimension_mismatch():
    A = normalized_adjacency(UserGraph(2, [(0, 1)]))
    with pytest.raises(ValueError):
        FusionProblem(np.ones((2, 3)), np.ones((2, 2)), A, A, [[0, 0]])
    prob = FusionProblem(np.ones((2, 3)), np.ones((2, 3)), A, A, [[0, 0]])
    with pytest.raises(ValueError):
        forward(prob, params(4))


def test_params_validate_shapes():
    d = 3
    with pytest.raises(ValueError):
        FusionParams(np.eye(d), np.eye(d), np.ones((4 * d, 2)), np.ones((5 * d, 2)), k=4)
    with pytest.raises(ValueError):
        FusionConfig(k=0)
    with pytest.raises(ValueError):
        FusionConfig(alpha=-1.0)


@pytest.fixture(scope="module")
def twin_graphs():
    rng = substream(0, "twin")
    n = 60
    iu, ju = np.triu_indices(n, 1)
    keep = rng.random(len(iu)) < 0.1
    g = UserGraph(n, np.column_stack([iu[keep], ju[keep]]))
    Z = rng.normal(size=(n, 8))
    return g, Z


def test_self_fusion_aligns_twins(twin_graphs):
    g, Z = twin_graphs
    n = g.n
    anchors = AnchorSet(tuple((f"a{i}", f"b{i}") for i in range(n)))
    run = fit_fusion(g, g, table(Z, "a"), table(Z, "b"), anchors, TrainConfig(epochs=500, learning_rate=0.01), FusionConfig(out_dim=8))
    A, B = run.O1.vectors, run.O2.vectors
    cos = np.einsum("ij,ij->i", A, B) / (np.linalg.norm(A, axis=1) * np.linalg.norm(B, axis=1))
    assert cos.mean() >= 0.9


def test_zero_epochs_is_initial_forward(twin_graphs):
    g, Z = twin_graphs
    pairs = np.array([[0, 0], [5, 5]])
    cfg, fcfg = TrainConfig(epochs=0, seed=3), FusionConfig(out_dim=4)
    run = fit_fusion(g, g, table(Z, "a"), table(Z, "b"), pairs, cfg, fcfg)
    p = FusionParams.init(8, fcfg, substream(3, "fusion"))
    A = normalized_adjacency(g)
    O1, O2, _ = forward(FusionProblem(Z, Z, A, A, pairs), p)
    np.testing.assert_array_equal(run.O1.vectors, O1)
    np.testing.assert_array_equal(run.O2.vectors, O2)
    again = fit_fusion(g, g, table(Z, "a"), table(Z, "b"), pairs, cfg, fcfg)
    np.testing.assert_array_equal(again.O1.vectors, run.O1.vectors)


def test_fit_warns_without_anchors(twin_graphs):
    g, Z = twin_graphs
    with pytest.warns(UserWarning, match="no anchors"):
        fit_fusion(g, g, table(Z, "a"), table(Z, "b"), np.zeros((0, 2)), TrainConfig(epochs=1), FusionConfig(out_dim=4))


def test_fit_rejects_row_mismatch(twin_graphs):
    g, Z = twin_graphs
    with pytest.raises(ValueError):
        fit_fusion(g, g, table(Z[:-1], "a"), table(Z, "b"), [[0, 0]])


def test_normalized_adjacency_is_sparse():
    A = normalized_adjacency(ring(50))
    assert sparse.issparse(A) and A.nnz == 100
