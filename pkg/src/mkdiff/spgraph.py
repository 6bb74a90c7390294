"""kNN graphs, Gaussian adjacencies, normalized Laplacians and graph geodesics.

All matrices are scipy CSR with sorted indices and no stored zeros.  Edge
weights follow the Gaussian kernel a_ij = exp(-dist^2 / (2 sigma^2)); directed
kNN relations are symmetrized by elementwise max so both Laplacian variants
see meaningful degrees.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import dijkstra
from scipy.spatial import cKDTree


@dataclass
class NeighborLists:
    k: int
    indices: np.ndarray   # (n, k) int64, row-wise by ascending (dist, index)
    dists: np.ndarray     # (n, k) float64

    @property
    def n(self) -> int:
        return self.indices.shape[0]


def build_knn(coords: np.ndarray, k: int) -> NeighborLists:
    """Exact Euclidean k-nearest neighbors, ties broken by smaller index.

    A kd-tree supplies candidates; boundary ties are resolved by widening the
    candidate set until the cut is unambiguous, so the result matches a
    brute-force scan exactly.
    """
    coords = np.ascontiguousarray(coords, dtype=np.float64)
    n = coords.shape[0]
    if not 1 <= k < n:
        raise ValueError(f"need 1 <= k < n, got k={k}, n={n}")
    tree = cKDTree(coords)
    indices = np.empty((n, k), dtype=np.int64)
    dists = np.empty((n, k), dtype=np.float64)
    q = min(n, k + 2)
    pending = np.arange(n)
    while pending.size:
        _, cand = tree.query(coords[pending], k=q)
        if q == 1:
            cand = cand[:, None]
        retry = []
        for row, i in enumerate(pending):
            cj = cand[row][cand[row] != i]
            # recompute distances so ordering agrees with a brute-force oracle
            d = np.linalg.norm(coords[cj] - coords[i], axis=1)
            order = np.lexsort((cj, d))
            cj, d = cj[order], d[order]
            if q < n and d.size > k and d[k] - d[k - 1] <= 1e-9 * max(1.0, d[k - 1]):
                retry.append(i)       # ambiguous cut, widen the candidate set
                continue
            indices[i] = cj[:k]
            dists[i] = d[:k]
        if not retry:
            break
        pending = np.asarray(retry)
        q = n if 2 * q >= n else 2 * q
    return NeighborLists(k, indices, dists)


def build_adjacency(nb: NeighborLists, sigma: float) -> sp.csr_matrix:
    """Gaussian edge weights exp(-d^2/(2 sigma^2)), max-symmetrized, zero diag."""
    if sigma <= 0:
        raise ValueError("sigma must be > 0")
    n, k = nb.indices.shape
    rows = np.repeat(np.arange(n), k)
    vals = np.exp(-nb.dists.ravel() ** 2 / (2.0 * sigma * sigma))
    a = sp.csr_matrix((vals, (rows, nb.indices.ravel())), shape=(n, n))
    a = a.maximum(a.T)
    a.setdiag(0.0)
    a.eliminate_zeros()
    a.sort_indices()
    return a


def degrees(a: sp.csr_matrix) -> np.ndarray:
    """Row sums of the adjacency; errors out on isolated nodes."""
    d = np.asarray(a.sum(axis=1)).ravel()
    if np.any(d <= 0):
        bad = int(np.argmin(d))
        raise ValueError(f"node {bad} has zero degree; diffusion undefined")
    return d


def _normalized_product(a: sp.csr_matrix, d: np.ndarray, kind: str) -> sp.csr_matrix:
    if kind == "sym":
        s = 1.0 / np.sqrt(d)
        m = sp.diags(s) @ a @ sp.diags(s)
        m = (m + m.T) * 0.5            # force exact symmetry
    elif kind == "rw":
        m = sp.diags(1.0 / d) @ a
    else:
        raise ValueError(f"unknown normalization {kind!r}")
    m = sp.csr_matrix(m)
    m.sort_indices()
    return m


def propagation(a: sp.csr_matrix, kind: str) -> sp.csr_matrix:
    """Degree-normalized propagation operator: D^-1/2 A D^-1/2 or D^-1 A."""
    return _normalized_product(a, degrees(a), kind)


def laplacian(a: sp.csr_matrix, kind: str) -> sp.csr_matrix:
    """Normalized Laplacian I - P with P the chosen propagation operator."""
    n = a.shape[0]
    lap = sp.csr_matrix(sp.eye(n) - propagation(a, kind))
    lap.sort_indices()
    return lap


def spmm(m: sp.spmatrix, x: np.ndarray) -> np.ndarray:
    """Sparse times dense with shape checking; accepts a vector or a matrix."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] != m.shape[1]:
        raise ValueError(f"dimension mismatch: {m.shape} @ {x.shape}")
    return m @ x


def distance_graph(nb: NeighborLists) -> sp.csr_matrix:
    """Symmetrized kNN graph weighted by Euclidean edge length.

    Zero-length edges (duplicate points) are floored at a tiny positive value
    so they stay stored in the sparse pattern and remain traversable.
    """
    n, k = nb.indices.shape
    rows = np.repeat(np.arange(n), k)
    w = np.maximum(nb.dists.ravel(), 1e-300)
    g = sp.csr_matrix((w, (rows, nb.indices.ravel())), shape=(n, n))
    g = g.maximum(g.T)
    return g


def graph_geodesics(nb: NeighborLists, source) -> np.ndarray:
    """Dijkstra path lengths from source node(s); unreachable nodes get +inf."""
    return dijkstra(distance_graph(nb), directed=False, indices=source)
