"""Cosine k-NN graphs and the symmetric normalization used by graph convolution."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import DegenerateEmbeddingError, InvalidKError

_NORM_FLOOR = 1e-12


@dataclass(frozen=True, eq=False)
class SparseAdjacency:
    """Binary symmetric adjacency without self-loops; edges sorted by (row, col)."""

    n: int
    rows: np.ndarray
    cols: np.ndarray
    k: int | None = None

    @property
    def edges(self):
        return list(zip(self.rows.tolist(), self.cols.tolist()))

    def to_csr(self):
        data = np.ones(self.rows.shape[0])
        return sp.csr_matrix((data, (self.rows, self.cols)), shape=(self.n, self.n))

    def degrees(self):
        return np.bincount(self.rows, minlength=self.n)


@dataclass(frozen=True, eq=False)
class NormalizedGraph:
    """``D^-1/2 (A + I) D^-1/2`` stored as CSR with sorted column indices."""

    n: int
    matrix: sp.csr_matrix
    k: int | None = None

    @classmethod
    def identity(cls, n):
        return cls(n, sp.identity(n, format="csr", dtype=np.float64))

    def entries(self):
        coo = self.matrix.tocoo()
        order = np.lexsort((coo.col, coo.row))
        return list(zip(coo.row[order].tolist(), coo.col[order].tolist(), coo.data[order].tolist()))

    def toarray(self):
        return self.matrix.toarray()

    def __matmul__(self, other):
        return self.matrix @ other


def _unit_rows(x):
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1)
    bad = np.flatnonzero(norms <= _NORM_FLOOR)
    if bad.size:
        raise DegenerateEmbeddingError(int(bad[0]))
    return x / norms[:, None]


def cosine_similarity(x):
    """Dense N x N cosine similarity, exactly symmetric."""
    u = _unit_rows(x)
    s = u @ u.T
    return 0.5 * (s + s.T)


def _check_k(k, n):
    if n >= 2 and not 1 <= k <= n - 1:
        raise InvalidKError(f"k must lie in [1, {n - 1}] for {n} nodes, got {k}")
    if n < 1:
        raise InvalidKError("graph needs at least one node")


def _topk_rows(s_block, row_offset, k):
    """Top-k column indices per row, self excluded, ties to the smaller index."""
    s_block = np.array(s_block, dtype=np.float64)
    rows = np.arange(s_block.shape[0])
    s_block[rows, rows + row_offset] = -np.inf
    # stable sort keeps ascending column order among equal similarities
    return np.argsort(-s_block, axis=1, kind="stable")[:, :k]


def _symmetric_union(n, picks, k):
    src = np.repeat(np.arange(n), picks.shape[1])
    dst = picks.ravel()
    a = sp.coo_matrix((np.ones(src.size), (src, dst)), shape=(n, n)).tocsr()
    a = a + a.T
    a = a.tocoo()
    order = np.lexsort((a.col, a.row))
    return SparseAdjacency(n, a.row[order].astype(np.int64), a.col[order].astype(np.int64), k)


def knn_graph(s, k):
    """Union-symmetrized k-NN adjacency from a dense similarity matrix."""
    s = np.asarray(s)
    n = s.shape[0]
    _check_k(k, n)
    if n == 1:
        return SparseAdjacency(1, np.zeros(0, np.int64), np.zeros(0, np.int64), k)
    return _symmetric_union(n, _topk_rows(s, 0, k), k)


def knn_graph_from_features(x, k, block_rows=2048):
    """k-NN graph over the rows of ``x``, evaluating similarities in row blocks.

    Below ``block_rows`` nodes this is exactly ``knn_graph(cosine_similarity(x), k)``.
    """
    u = _unit_rows(x)
    n = u.shape[0]
    _check_k(k, n)
    if n == 1:
        return SparseAdjacency(1, np.zeros(0, np.int64), np.zeros(0, np.int64), k)
    if n <= block_rows:
        return knn_graph(cosine_similarity(x), k)
    picks = np.empty((n, k), dtype=np.int64)
    for start in range(0, n, block_rows):
        stop = min(start + block_rows, n)
        picks[start:stop] = _topk_rows(u[start:stop] @ u.T, start, k)
    return _symmetric_union(n, picks, k)


def normalize_adjacency(adj):
    a_tilde = (adj.to_csr() + sp.identity(adj.n, format="csr")).tocoo()
    deg = np.asarray(a_tilde.sum(axis=1)).ravel()
    # one rounding per entry: A~_ij / sqrt(d_i d_j)
    weights = a_tilde.data / np.sqrt(deg[a_tilde.row] * deg[a_tilde.col])
    m = sp.csr_matrix((weights, (a_tilde.row, a_tilde.col)), shape=a_tilde.shape)
    m.sort_indices()
    return NormalizedGraph(adj.n, m, adj.k)


def build_graph(x, k):
    """Normalized k-NN graph over the rows of ``x``."""
    return normalize_adjacency(knn_graph_from_features(x, k))


def dump_graph(path, graph, k=None):
    """Write ``n=<N> k=<k>`` then ``i j w`` lines sorted lexicographically."""
    k = graph.k if k is None else k
    if isinstance(graph, SparseAdjacency):
        triples = [(i, j, 1.0) for i, j in graph.edges]
    else:
        triples = graph.entries()
    with open(path, "w") as fh:
        fh.write(f"n={graph.n} k={k}\n")
        for i, j, w in triples:
            fh.write(f"{i} {j} {w!r}\n")
