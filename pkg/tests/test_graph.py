import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gcnood.errors import DegenerateEmbeddingError, InvalidKError
from gcnood.graph import (
    SparseAdjacency,
    build_graph,
    cosine_similarity,
    dump_graph,
    knn_graph,
    knn_graph_from_features,
    normalize_adjacency,
)

from .oracles import dense_normalized_adjacency, power_iteration_radius


def _adjacency_from_dense(a):
    rows, cols = np.nonzero(a)
    return SparseAdjacency(len(a), rows.astype(np.int64), cols.astype(np.int64))


def _random_adjacency(rng, n, p):
    upper = np.triu(rng.random((n, n)) < p, 1)
    return (upper | upper.T).astype(float)


def test_cosine_examples():
    assert cosine_similarity([[1.0, 2.0], [1.0, 2.0]])[0, 1] == pytest.approx(1.0, abs=1e-12)
    assert cosine_similarity([[1.0, 0.0], [0.0, 1.0]])[0, 1] == 0.0
    assert cosine_similarity([[1.0, 0.0], [1.0, 1.0]])[0, 1] == pytest.approx(0.70710678, abs=1e-8)


def test_cosine_zero_row_names_the_row():
    with pytest.raises(DegenerateEmbeddingError) as err:
        cosine_similarity([[1.0, 0.0], [0.0, 0.0], [1.0, 1.0]])
    assert err.value.row == 1


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 15), d=st.integers(1, 6),
       c=st.floats(1e-3, 1e3))
def test_cosine_properties(seed, n, d, c):
    x = np.random.default_rng(seed).normal(size=(n, d)) + 0.1
    s = cosine_similarity(x)
    assert np.array_equal(s, s.T)
    assert np.all(np.abs(np.diag(s) - 1) <= 1e-12)
    assert np.all(np.abs(s) <= 1 + 1e-12)
    np.testing.assert_allclose(cosine_similarity(c * x), s, atol=1e-12)


def test_knn_complete_graph_when_k_is_n_minus_one():
    s = cosine_similarity(np.random.default_rng(0).normal(size=(5, 3)))
    adj = knn_graph(s, 4)
    assert len(adj.edges) == 5 * 4


def test_knn_three_node_hand_case():
    s = np.array([[1.0, 0.9, 0.1], [0.9, 1.0, 0.2], [0.1, 0.8, 1.0]])
    adj = knn_graph(s, 1)
    assert adj.edges == [(0, 1), (1, 0), (1, 2), (2, 1)]


def test_knn_ties_go_to_smaller_index():
    adj = knn_graph(np.ones((4, 4)), 1)
    # 0 picks 1; 1, 2 and 3 all pick 0
    assert adj.edges == [(0, 1), (0, 2), (0, 3), (1, 0), (2, 0), (3, 0)]


def test_knn_single_node_and_k_errors():
    assert knn_graph(np.ones((1, 1)), 3).edges == []
    with pytest.raises(InvalidKError):
        knn_graph(np.eye(3), 3)
    with pytest.raises(InvalidKError):
        knn_graph(np.eye(3), 0)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(2, 14), data=st.data())
def test_knn_invariants(seed, n, data):
    k = data.draw(st.integers(1, n - 1))
    x = np.random.default_rng(seed).normal(size=(n, 4))
    adj = knn_graph(cosine_similarity(x), k)
    pairs = set(adj.edges)
    assert all((j, i) in pairs for i, j in pairs)
    assert all(i != j for i, j in pairs)
    assert len(pairs) == len(adj.edges)
    deg = adj.degrees()
    assert deg.min() >= k and deg.max() <= n - 1


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(2, 12), data=st.data())
def test_knn_permutation_equivariance(seed, n, data):
    k = data.draw(st.integers(1, n - 1))
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 5))
    perm = rng.permutation(n)
    a = knn_graph(cosine_similarity(x), k)
    b = knn_graph(cosine_similarity(x[perm]), k)
    # node perm[i] of the original is node i of the permuted graph
    relabeled = sorted((int(perm[i]), int(perm[j])) for i, j in b.edges)
    assert relabeled == a.edges


def test_blocked_graph_matches_dense():
    x = np.random.default_rng(3).normal(size=(53, 6))
    dense = knn_graph(cosine_similarity(x), 4)
    blocked = knn_graph_from_features(x, 4, block_rows=10)
    assert dense.edges == blocked.edges


def test_normalize_hand_cases():
    iso = normalize_adjacency(_adjacency_from_dense(np.zeros((1, 1))))
    assert iso.toarray().tolist() == [[1.0]]
    pair = normalize_adjacency(_adjacency_from_dense(np.array([[0, 1], [1, 0]])))
    np.testing.assert_allclose(pair.toarray(), 0.5 * np.ones((2, 2)), rtol=1e-15)
    tri = normalize_adjacency(_adjacency_from_dense(np.ones((3, 3)) - np.eye(3)))
    np.testing.assert_allclose(tri.toarray(), np.full((3, 3), 1 / 3), rtol=1e-15)


@pytest.mark.parametrize("n", [3, 5, 8])
def test_regular_graph_rows_sum_to_one(n):
    cycle = np.zeros((n, n))
    for i in range(n):
        cycle[i, (i + 1) % n] = cycle[(i + 1) % n, i] = 1
    complete = np.ones((n, n)) - np.eye(n)
    for a in (cycle, complete):
        m = normalize_adjacency(_adjacency_from_dense(a)).toarray()
        np.testing.assert_allclose(m.sum(axis=1), 1.0, atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 12), p=st.floats(0, 1))
def test_normalized_matches_dense_oracle(seed, n, p):
    a = _random_adjacency(np.random.default_rng(seed), n, p)
    m = normalize_adjacency(_adjacency_from_dense(a)).toarray()
    np.testing.assert_allclose(m, dense_normalized_adjacency(a), atol=1e-15)
    assert np.array_equal(m, m.T)
    assert np.all(np.diag(m) > 0)
    assert power_iteration_radius(m, iters=300) <= 1 + 1e-9


def test_entries_sorted_and_symmetric():
    g = build_graph(np.random.default_rng(1).normal(size=(9, 3)), 2)
    entries = g.entries()
    assert entries == sorted(entries)
    weights = {(i, j): w for i, j, w in entries}
    assert all(weights[(j, i)] == w for (i, j), w in weights.items())


def test_dump_graph_format(tmp_path):
    g = normalize_adjacency(_adjacency_from_dense(np.array([[0, 1], [1, 0]])))
    dump_graph(tmp_path / "g.txt", g, k=1)
    lines = (tmp_path / "g.txt").read_text().splitlines()
    assert lines[0] == "n=2 k=1"
    assert lines[1:] == ["0 0 0.5", "0 1 0.5", "1 0 0.5", "1 1 0.5"]
