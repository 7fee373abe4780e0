import math

import numpy as np
import pytest

from hncr.data import build_interaction_matrix
from hncr.neighbors import (
    NeighborFileError,
    NeighborSets,
    build_neighbor_sets,
    build_relational_graph,
    cooccurrence_neighbors,
    edge_weight,
    edge_weight_user,
    embed_relational_graph,
    load_latent,
    load_neighbor_sets,
    save_latent,
    save_neighbor_sets,
    semantic_neighbors,
)
from hncr.synthetic import two_block_pairs


def matrix(pairs, M, N):
    return build_interaction_matrix(np.array(pairs, dtype=np.int64).reshape(-1, 2), M, N)


# users a..d in a chain: neighbours along the chain share one item, a and d share none
CHAIN = matrix([(0, 0), (0, 1), (1, 1), (1, 2), (2, 2), (2, 3), (3, 3), (3, 4)], 4, 5)


# ---------------------------------------------------------------- edge weights


def test_identical_rows_heat_one():
    m = matrix([(0, 0), (0, 1), (1, 0), (1, 1)], 2, 2)
    # h = 1 and each common item has two raters: c = (2/2)(1/2 + 1/2) = 1
    assert edge_weight_user(0, 1, m) == pytest.approx(1.0)


def test_popularity_factor_single_item():
    m = matrix([(0, 0), (1, 0), (0, 1)], 2, 2)
    # C = {0}, |I_v(0)| = 2 -> c = 1; |Y_a - Y_b|^2 = 1
    assert edge_weight_user(0, 1, m) == pytest.approx(math.exp(-1 / 100))


def test_heat_kernel_e_minus_one():
    # users share item 0; user 0 has 50 extra items, user 1 another 50 -> squared distance 100
    pairs = [(0, 0), (1, 0)] + [(0, 1 + k) for k in range(50)] + [(1, 51 + k) for k in range(50)]
    m = matrix(pairs, 2, 101)
    w = edge_weight_user(0, 1, m)
    assert w == pytest.approx(math.exp(-1.0) * 1.0)
    assert math.exp(-1.0) == pytest.approx(0.3679, abs=1e-4)


def test_no_common_item_no_edge():
    assert edge_weight_user(0, 3, CHAIN) is None
    with pytest.raises(ValueError):
        edge_weight(1, 1, CHAIN)


def test_chain_graph_edges():
    g = build_relational_graph(CHAIN, "user")
    assert not g.has_edge(0, 3)
    for a, b in ((0, 1), (1, 2), (2, 3)):
        assert g.has_edge(a, b) and g.has_edge(b, a)
    assert g.n_edges == 3


def test_vectorized_weights_match_pairwise():
    pairs = two_block_pairs(30, 40, mean_degree=6, seed=3)
    m = matrix(pairs, 30, 40)
    for side, n in (("user", 30), ("item", 40)):
        g = build_relational_graph(m, side)
        for a in range(n):
            for b in range(n):
                if a == b:
                    continue
                w = edge_weight(a, b, m, side)
                if w is None:
                    assert not g.has_edge(a, b)
                else:
                    assert g.W[a, b] == pytest.approx(w, rel=1e-12)


def test_weight_modes_and_invariants():
    pairs = two_block_pairs(40, 50, mean_degree=6, seed=4)
    m = matrix(pairs, 40, 50)
    paper = build_relational_graph(m, "user", "paper")
    common = build_relational_graph(m, "user", "common")
    flat = build_relational_graph(m, "user", "none")
    for g in (paper, common, flat):
        assert (g.W != g.W.T).nnz == 0
        assert g.W.diagonal().sum() == 0
        assert np.all(g.W.data > 0)
    assert (paper.W != 0).nnz == (common.W != 0).nnz == (flat.W != 0).nnz
    assert np.all(flat.W.data == 1.0)
    Y = m.Y.toarray()
    a, b, w = common.edge_list()
    np.testing.assert_array_equal(w, (Y[a] * Y[b]).sum(axis=1))
    # c-factor in (0, 2] and h in (0, 1] bound the product
    assert np.all(paper.W.data <= 2.0)
    with pytest.raises(ValueError):
        build_relational_graph(m, "user", "bogus")


def test_single_user_graph():
    g = build_relational_graph(matrix([(0, 0), (0, 1)], 1, 2), "user")
    assert g.n_edges == 0


# ---------------------------------------------------------------- LINE


def test_two_node_embedding_pulls_together():
    g = build_relational_graph(matrix([(0, 0), (1, 0)], 2, 1), "user")
    z = embed_relational_graph(g, dim=8, epochs=3000, seed=0, batch_size=1)
    assert 1 / (1 + math.exp(-z[0] @ z[1])) > 0.9


def test_embedding_deterministic():
    g = build_relational_graph(CHAIN, "user")
    a = embed_relational_graph(g, dim=4, epochs=20, seed=9)
    b = embed_relational_graph(g, dim=4, epochs=20, seed=9)
    np.testing.assert_array_equal(a, b)


def test_edgeless_graph_gives_zeros(caplog):
    g = build_relational_graph(matrix([(0, 0), (1, 1)], 2, 2), "user")
    z = embed_relational_graph(g, dim=3)
    np.testing.assert_array_equal(z, np.zeros((2, 3)))
    assert "no edges" in caplog.text


def two_block_graph(n=20, seed=0):
    # dense blocks {0..9} and {10..19}, each user rating its block's items plus noise
    rng = np.random.default_rng(seed)
    pairs = set()
    for u in range(n):
        base = 0 if u < n // 2 else 10
        for i in rng.choice(10, size=5, replace=False):
            pairs.add((u, base + int(i)))
    return build_relational_graph(matrix(sorted(pairs), n, 20), "user")


def test_connected_pairs_score_higher():
    g = two_block_graph()
    z = embed_relational_graph(g, dim=16, epochs=200, seed=1)
    dense = g.W.toarray() > 0
    s = z @ z.T
    off = ~np.eye(20, dtype=bool)
    assert s[dense & off].mean() > s[~dense & off].mean()


def test_block_recovery_on_dense_blocks():
    g = two_block_graph()
    z = embed_relational_graph(g, dim=16, epochs=200, seed=1)
    sets = semantic_neighbors(z, 5)
    same = [np.mean((sets[a] >= 10) == (a >= 10)) for a in range(20)]
    assert np.mean(same) >= 0.9


# ---------------------------------------------------------------- k-NN


def test_four_user_toy():
    z = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 2.0], [3.0, 0.0]])
    sets = semantic_neighbors(z, 3)
    assert sets[0].tolist() == [1, 2, 3]


def test_k_zero_and_k_large():
    z = np.random.default_rng(0).normal(size=(5, 2))
    assert all(len(x) == 0 for x in semantic_neighbors(z, 0).lists)
    big = semantic_neighbors(z, 10)
    assert all(sorted(big[a].tolist()) == [b for b in range(5) if b != a] for a in range(5))


def test_ties_by_smaller_id():
    z = np.array([[0.0], [1.0], [-1.0], [1.0]])
    assert semantic_neighbors(z, 2)[0].tolist() == [1, 2]
    assert semantic_neighbors(z, 3)[0].tolist() == [1, 2, 3]


def test_sorted_by_distance_and_matches_bruteforce():
    rng = np.random.default_rng(2)
    z = rng.normal(size=(60, 5))
    exact = semantic_neighbors(z, 7, block=7)
    fast = semantic_neighbors(z, 7, accelerated=True)
    D = np.linalg.norm(z[:, None] - z[None], axis=-1)
    for a in range(60):
        d = D[a, exact[a]]
        assert np.all(np.diff(d) >= 0)
        ref = sorted((D[a, b], b) for b in range(60) if b != a)[:7]
        assert exact[a].tolist() == [b for _, b in ref]
        assert set(fast[a].tolist()) == set(exact[a].tolist())


def test_excluded_candidates():
    z = np.array([[0.0], [0.1], [5.0]])
    sets = semantic_neighbors(z, 2, candidates=np.array([True, False, True]))
    assert sets[0].tolist() == [2]
    assert sets[1].tolist() == []


def test_cooccurrence_neighbors():
    g = build_relational_graph(CHAIN, "user", "common")
    sets = cooccurrence_neighbors(g, 5)
    assert sets[1].tolist() == [0, 2]
    assert sets.mode == "cooccurrence"
    W = g.W.tolil()
    W[1, 0] = W[0, 1] = 0.9
    W[1, 2] = W[2, 1] = 0.1
    g.W = W.tocsr()
    assert cooccurrence_neighbors(g, 1)[1].tolist() == [0]
    iso = build_relational_graph(matrix([(0, 0), (1, 0), (2, 1)], 3, 2), "user")
    assert cooccurrence_neighbors(iso, 5)[2].tolist() == []


def test_pipeline_excludes_isolated_nodes():
    m = matrix([(0, 0), (1, 0), (2, 0), (3, 1)], 4, 2)
    sets, latent = build_neighbor_sets(m, "user", 3, dim=4, epochs=5, seed=0)
    assert sets[3].tolist() == []
    assert all(3 not in sets[a] for a in range(4))
    assert latent.shape == (4, 4)


def test_pipeline_deterministic():
    pairs = two_block_pairs(40, 60, mean_degree=8, seed=1)
    m = matrix(pairs, 40, 60)
    a, _ = build_neighbor_sets(m, "item", 5, dim=8, epochs=5, seed=3)
    b, _ = build_neighbor_sets(m, "item", 5, dim=8, epochs=5, seed=3)
    assert a == b


# ---------------------------------------------------------------- files


def test_neighbor_file_round_trip(tmp_path):
    pairs = two_block_pairs(30, 40, mean_degree=6, seed=2)
    m = matrix(pairs, 30, 40)
    for mode in ("semantic", "cooccurrence"):
        sets, _ = build_neighbor_sets(m, "user", 4, "common", mode, dim=4, epochs=3, seed=11)
        save_neighbor_sets(tmp_path / "n.txt", sets)
        back = load_neighbor_sets(tmp_path / "n.txt", 30)
        assert back == sets


def test_empty_sets_round_trip(tmp_path):
    sets = NeighborSets.empty("item", 3)
    save_neighbor_sets(tmp_path / "n.txt", sets)
    assert load_neighbor_sets(tmp_path / "n.txt") == sets


def test_node_count_mismatch(tmp_path):
    save_neighbor_sets(tmp_path / "n.txt", NeighborSets.empty("user", 3))
    with pytest.raises(NeighborFileError, match="3"):
        load_neighbor_sets(tmp_path / "n.txt", 4)


@pytest.mark.parametrize(
    "text", ["", "user 2\n0:\n", "user 2 0 paper\n0: 1\n1: x\n", "user 2 0 paper\n0: 0\n1:\n", "user 1 0 paper\n0: 7\n"]
)
def test_corrupt_files(tmp_path, text):
    (tmp_path / "n.txt").write_text(text)
    with pytest.raises(NeighborFileError):
        load_neighbor_sets(tmp_path / "n.txt")


def test_latent_round_trip(tmp_path):
    z = np.random.default_rng(0).normal(size=(4, 3))
    save_latent(tmp_path / "z.txt", z)
    np.testing.assert_array_equal(load_latent(tmp_path / "z.txt"), z)
