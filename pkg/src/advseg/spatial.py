"""Spatial index, neighbor queries, outlier removal, geometric importance."""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from .cloud import LabeledCloud


class SpatialIndex:
    """KD-tree over a cloud's points with deterministic query semantics.

    Results match a brute-force scan exactly: sorted by ascending
    Euclidean distance, distance ties broken by the lower point ordinal.
    """

    def __init__(self, points: np.ndarray):
        self.points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        self._tree = cKDTree(self.points) if len(self.points) else None
        self._neighbor_cache: dict = {}

    def __len__(self) -> int:
        return self.points.shape[0]

    def query(self, position, k: int) -> tuple[np.ndarray, np.ndarray]:
        """k nearest ordinals and distances for one query position."""
        if k < 1:
            raise ValueError(f"k must be >= 1, got {k}")
        n = len(self)
        if n == 0:
            return np.empty(0, dtype=np.int64), np.empty(0)
        k_eff = min(k, n)
        q = np.asarray(position, dtype=np.float64).reshape(3)
        dist, idx = self._tree.query(q, k=k_eff)
        dist = np.atleast_1d(dist)
        idx = np.atleast_1d(idx)
        # re-resolve around the kth distance so that ties at the cut are
        # decided by ordinal, not by tree traversal order
        r = dist[-1] * (1.0 + 1e-12) + 1e-300
        candidates = np.asarray(self._tree.query_ball_point(q, r), dtype=np.int64)
        if candidates.size > k_eff:
            cd = np.linalg.norm(self.points[candidates] - q, axis=1)
            order = np.lexsort((candidates, cd))[:k_eff]
            chosen = candidates[order]
            return chosen, np.linalg.norm(self.points[chosen] - q, axis=1)
        order = np.lexsort((idx, dist))
        return idx[order].astype(np.int64), dist[order]

    def query_many(self, positions: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
        """Vectorized k-NN for (M, 3) queries -> (M, k) ordinals and distances.

        Tie ordering at the kth neighbor follows the tree's traversal; use
        :meth:`query` where the exact ordinal tie rule matters.
        """
        if k < 1:
            raise ValueError(f"k must be >= 1, got {k}")
        k_eff = min(k, len(self))
        dist, idx = self._tree.query(np.asarray(positions, dtype=np.float64), k=k_eff)
        if k_eff == 1:
            dist = dist[:, None]
            idx = idx[:, None]
        return idx.astype(np.int64), dist


def build_index(cloud: LabeledCloud) -> SpatialIndex:
    return SpatialIndex(cloud.points)


def knn(index: SpatialIndex, position, k: int) -> list[tuple[int, float]]:
    """min(k, N) nearest (ordinal, distance) pairs, ascending by distance."""
    idx, dist = index.query(position, k)
    return [(int(i), float(d)) for i, d in zip(idx, dist)]


def neighbor_table(index: SpatialIndex, k: int, exclude_self: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """(N, k) neighbor ordinals/distances for every indexed point, memoized
    on the index.

    With ``exclude_self`` the point itself (matched by ordinal) is removed
    from its own neighbor list.
    """
    key = (k, exclude_self)
    cached = index._neighbor_cache.get(key)
    if cached is not None:
        return cached
    n = len(index)
    if not exclude_self:
        result = index.query_many(index.points, k)
    else:
        idx, dist = index.query_many(index.points, k + 1)
        rows = np.arange(n)
        self_pos = np.argmax(idx == rows[:, None], axis=1)
        has_self = idx[rows, self_pos] == rows
        # drop the self entry where present, else drop the farthest
        drop = np.where(has_self, self_pos, idx.shape[1] - 1)
        keep = np.ones_like(idx, dtype=bool)
        keep[rows, drop] = False
        result = idx[keep].reshape(n, -1), dist[keep].reshape(n, -1)
    index._neighbor_cache[key] = result
    return result


def statistical_outlier_removal(cloud: LabeledCloud, k: int = 8,
                                std_mult: float = 1.0) -> tuple[LabeledCloud, np.ndarray]:
    """Drop points whose mean k-NN distance exceeds mean + std_mult * std.

    The statistic is computed over the whole cloud (PCL convention);
    points sitting exactly on the threshold are kept. Returns the
    filtered cloud and the boolean keep mask.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if std_mult <= 0:
        raise ValueError(f"std_mult must be > 0, got {std_mult}")
    n = len(cloud)
    if n <= k:
        raise ValueError(f"need more than k={k} points, got {n}")
    index = build_index(cloud)
    _, dist = neighbor_table(index, k, exclude_self=True)
    score = dist.mean(axis=1)
    mu = score.mean()
    sigma = score.std()
    keep = score <= mu + std_mult * sigma
    return cloud.select(keep), keep


def local_covariance_eigenvalues(points: np.ndarray, neighbor_idx: np.ndarray) -> np.ndarray:
    """Descending eigenvalues of each point's neighborhood covariance.

    ``neighbor_idx`` is (N, k); the covariance is over the k referenced
    points (population normalization). Output is (N, 3), λ1 >= λ2 >= λ3.
    """
    nbrs = points[neighbor_idx]                       # (N, k, 3)
    centered = nbrs - nbrs.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / neighbor_idx.shape[1]
    vals = np.linalg.eigvalsh(cov)                    # ascending
    return np.clip(vals[:, ::-1], 0.0, None)


def geometric_importance(cloud: LabeledCloud, k: int = 8) -> np.ndarray:
    """Surface-variation score per point, min-max rescaled to [0, 1].

    The raw score is λ3 / (λ1 + λ2 + λ3) over the covariance of the
    point's k-NN neighborhood (the point plus its k - 1 nearest others).
    Flat regions score near 0; edges, corners and sparse clutter score
    high. Degenerate neighborhoods (all points identical) score 0.
    """
    n = len(cloud)
    if k < 3:
        raise ValueError(f"k must be >= 3, got {k}")
    if n <= k:
        raise ValueError(f"need more than k={k} points, got {n}")
    index = build_index(cloud)
    idx, _ = index.query_many(cloud.points, k)
    vals = local_covariance_eigenvalues(cloud.points, idx)
    total = vals.sum(axis=1)
    raw = np.where(total > 0, vals[:, 2] / np.where(total > 0, total, 1.0), 0.0)
    lo, hi = raw.min(), raw.max()
    if hi > lo:
        return (raw - lo) / (hi - lo)
    return np.zeros(n)
