"""Dilated K-nearest-neighbour graphs over node features.

Candidates for node ``i`` are all ``j != i`` sorted by squared Euclidean
distance, ties broken by ascending index.  Dilation ``d`` keeps candidate
ranks ``0, d, 2d, ...`` until ``K`` are chosen; when the candidate list runs
out first, ``K`` is clamped to what was reachable.  Indices are constants:
nothing here is differentiated.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import DegenerateGraphError, NumericError, ShapeError


@dataclass(frozen=True)
class NeighborTable:
    """Row ``i`` of ``indices`` lists the neighbours of node ``i``, nearest first."""

    indices: np.ndarray
    dilation: int
    requested_k: int

    @property
    def node_count(self) -> int:
        return self.indices.shape[0]

    @property
    def k(self) -> int:
        """Effective neighbour count (after clamping)."""
        return self.indices.shape[1]

    @property
    def clamped(self) -> bool:
        return self.k < self.requested_k


def effective_k(n: int, k: int, dilation: int) -> int:
    """Neighbours reachable with stride ``dilation`` among ``n - 1`` candidates."""
    return min(k, -(-(n - 1) // dilation)) if n > 1 else 0


def _check_features(X):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 1 or X.shape[1] < 1:
        raise ShapeError(f"expected an N×D feature matrix, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise NumericError("features contain non-finite values")
    return X


def _check_knn_args(n, k, dilation):
    if n < 2:
        raise DegenerateGraphError(f"a KNN graph needs at least 2 nodes, got {n}")
    if k < 1 or dilation < 1:
        raise ValueError(f"K and dilation must be positive, got K={k}, dilation={dilation}")


def _sq_dist(X: np.ndarray) -> np.ndarray:
    """Batched squared distances for ``X`` of shape (..., N, D)."""
    sq = np.einsum("...nd,...nd->...n", X, X)
    gram = X @ np.swapaxes(X, -1, -2)
    d = sq[..., :, None] + sq[..., None, :] - 2.0 * gram
    d = 0.5 * (d + np.swapaxes(d, -1, -2))
    np.maximum(d, 0.0, out=d)
    n = X.shape[-2]
    d[..., np.arange(n), np.arange(n)] = 0.0
    return d


def pairwise_sq_dist(X) -> np.ndarray:
    """N×N squared Euclidean distances: symmetric with an exactly zero diagonal."""
    return _sq_dist(_check_features(X))


def knn_indices(X: np.ndarray, k: int, dilation: int = 1) -> np.ndarray:
    """Dilated neighbour indices for a batch of graphs.

    ``X`` has shape (..., N, D); the result has shape (..., N, K_eff).
    """
    n = X.shape[-2]
    _check_knn_args(n, k, dilation)
    d = _sq_dist(np.asarray(X, dtype=np.float64))
    d[..., np.arange(n), np.arange(n)] = np.inf
    # stable sort: equal distances keep ascending index order; self sorts last
    order = np.argsort(d, axis=-1, kind="stable")[..., : n - 1]
    ranks = np.arange(0, n - 1, dilation)[:k]
    return np.ascontiguousarray(order[..., ranks])


def knn_dilated(X, k: int, dilation: int = 1) -> NeighborTable:
    X = _check_features(X)
    return NeighborTable(knn_indices(X, k, dilation), dilation, k)


def knn_bruteforce_oracle(X, k: int, dilation: int = 1) -> NeighborTable:
    """Reference construction by explicit per-pair loops and a full sort."""
    X = _check_features(X)
    n, dim = X.shape
    _check_knn_args(n, k, dilation)
    rows = []
    for i in range(n):
        cands = []
        for j in range(n):
            if j == i:
                continue
            dist = 0.0
            for c in range(dim):
                diff = X[i, c] - X[j, c]
                dist += diff * diff
            cands.append((dist, j))
        cands.sort()
        picked = [j for _, j in cands[::dilation]][:k]
        rows.append(picked)
    return NeighborTable(np.array(rows, dtype=np.intp).reshape(n, -1), dilation, k)


def dilation_for_layer(layer: int, period: int = 4) -> int:
    """Dilation of the ``layer``-th Grapher (1-based, counted across all stages)."""
    if layer < 1:
        raise ValueError(f"layer index is 1-based, got {layer}")
    return max(1, -(-layer // period))
