"""Training query generation around a point cloud."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import PointCloud, nearest_many


@dataclass(frozen=True, eq=False)
class QueryBatch:
    queries: np.ndarray          # (M, 3)
    anchor_index: np.ndarray     # (M,) sampling centre, -1 for far-field queries
    nearest_point: np.ndarray    # (M, 3)
    nearest_index: np.ndarray    # (M,)
    nearest_distance: np.ndarray  # (M,)
    sigma: np.ndarray            # (N,) per-point scale used

    def __len__(self):
        return len(self.queries)

    def subset(self, idx) -> "QueryBatch":
        return QueryBatch(self.queries[idx], self.anchor_index[idx], self.nearest_point[idx],
                          self.nearest_index[idx], self.nearest_distance[idx], self.sigma)

    def target_index(self) -> np.ndarray:
        """Anchor point per query, falling back to the nearest point for far-field ones."""
        return np.where(self.anchor_index >= 0, self.anchor_index, self.nearest_index)


def adaptive_sigma(cloud: PointCloud, k: int = 50) -> np.ndarray:
    """Distance from every point to its k-th nearest other point (k clamped to N-1)."""
    n = len(cloud)
    if n == 1:
        return np.full(1, 0.05)
    k = min(k, n - 1)
    d, _ = cloud.tree.query(cloud.points, k=k + 1)
    return np.asarray(d).reshape(n, -1)[:, -1]


def sample_queries(cloud: PointCloud, per_point: int, seed: int, k: int = 50,
                   uniform_fraction: float = 0.1, uniform_bound: float = 0.55,
                   sigma: np.ndarray | None = None) -> QueryBatch:
    """Gaussian queries around every point plus a share of far-field uniform ones.

    Each point ``p_i`` gets ``per_point`` queries ``p_i + e`` with
    ``e ~ N(0, (sigma_i^2 / 3) I)``, so the RMS offset is ``sigma_i``.
    ``uniform_fraction`` is the share of the *final* batch drawn uniformly in
    ``[-uniform_bound, uniform_bound]^3`` (rounded down).
    """
    if per_point < 1:
        raise ValueError("per_point must be >= 1")
    rng = np.random.default_rng(seed)
    pts = cloud.points
    n = len(pts)
    if sigma is None:
        sigma = adaptive_sigma(cloud, k)
    anchors = np.repeat(np.arange(n), per_point)
    offsets = rng.normal(size=(n * per_point, 3)) * (sigma[anchors] / np.sqrt(3.0))[:, None]
    queries = pts[anchors] + offsets
    n_gauss = len(queries)
    n_uniform = int(np.floor(uniform_fraction / (1.0 - uniform_fraction) * n_gauss + 1e-9)) \
        if uniform_fraction > 0 else 0
    if n_uniform:
        far = rng.uniform(-uniform_bound, uniform_bound, size=(n_uniform, 3))
        queries = np.concatenate([queries, far])
        anchors = np.concatenate([anchors, np.full(n_uniform, -1)])
    near_p, near_i, near_d = nearest_many(cloud, queries)
    return QueryBatch(queries, anchors, near_p, near_i, near_d, sigma)
