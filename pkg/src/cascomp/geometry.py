"""Deterministic point-set kernels.

Point clouds are (n, 3) float64 arrays in normalized object units. Every
operation here is pure, exact (no approximate neighbors), and breaks distance
ties by lowest point index, so results are reproducible bit-for-bit.
Squared distances are compared wherever only the ordering matters.
"""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from .errors import ContractViolation, DegenerateInput
from .rng import Stream


def as_cloud(points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ContractViolation(f"point cloud must be (n, 3), got {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise ContractViolation("point cloud contains non-finite coordinates")
    return pts


def normalize(points) -> tuple[np.ndarray, np.ndarray, float]:
    """Center on the centroid and scale the farthest point to norm 1.

    Returns (normalized cloud, centroid, scale); the inverse transform is
    `cloud * scale + centroid`.
    """
    pts = as_cloud(points)
    if len(pts) < 2:
        raise DegenerateInput("normalize needs at least 2 points")
    centroid = pts.mean(axis=0)
    centered = pts - centroid
    scale = float(np.sqrt((centered ** 2).sum(axis=1).max()))
    if scale == 0.0:
        raise DegenerateInput("all points identical")
    return centered / scale, centroid, scale


def denormalize(points, centroid, scale: float) -> np.ndarray:
    return as_cloud(points) * scale + np.asarray(centroid, dtype=np.float64)


def fps(points, k: int, start_index: int = 0) -> np.ndarray:
    """Greedy farthest-point sampling.

    First pick is `start_index`; each later pick maximizes the minimum squared
    distance to the picked set, ties going to the lowest index. Returns the k
    picked indices in pick order.
    """
    pts = as_cloud(points)
    n = len(pts)
    if not 1 <= k <= n:
        raise ContractViolation(f"fps needs 1 <= k <= {n}, got {k}")
    if not 0 <= start_index < n:
        raise ContractViolation(f"fps start index {start_index} out of range")
    picks = np.empty(k, dtype=np.int64)
    picks[0] = start_index
    d2 = ((pts - pts[start_index]) ** 2).sum(axis=1)
    d2[start_index] = -1.0  # picked sentinel, never selected again
    for i in range(1, k):
        nxt = int(np.argmax(d2))  # argmax takes the first (lowest) index on ties
        picks[i] = nxt
        nd2 = ((pts - pts[nxt]) ** 2).sum(axis=1)
        np.minimum(d2, nd2, out=d2)
        d2[nxt] = -1.0
    return picks


class SpatialIndex:
    """Exact nearest-neighbor index over a fixed cloud (KD-tree backed).

    Immutable after build; answers are identical to an exhaustive scan,
    including the lowest-index rule on distance ties.
    """

    def __init__(self, points):
        self.points = as_cloud(points)
        if len(self.points) == 0:
            raise ContractViolation("cannot index an empty cloud")
        self.tree = cKDTree(self.points)

    def __len__(self):
        return len(self.points)

    def knn(self, query, k: int) -> np.ndarray:
        """k indices by ascending distance to `query`; ties by lowest index."""
        n = len(self.points)
        if not 1 <= k <= n:
            raise ContractViolation(f"knn needs 1 <= k <= {n}, got {k}")
        q = np.asarray(query, dtype=np.float64).reshape(3)
        d, _ = self.tree.query(q, k=k)
        r = float(np.max(np.atleast_1d(d)))
        # pull in every point at the k-th distance (slightly inflated radius
        # guards the float boundary), then rank exactly by (d^2, index)
        cand = np.asarray(self.tree.query_ball_point(q, r * (1.0 + 1e-12) + 5e-324),
                          dtype=np.int64)
        d2 = ((self.points[cand] - q) ** 2).sum(axis=1)
        order = np.lexsort((cand, d2))
        return cand[order][:k]

    def nn_dist(self, queries) -> np.ndarray:
        """Euclidean distance from each query to its nearest indexed point."""
        q = as_cloud(queries)
        d, _ = self.tree.query(q, k=1)
        return np.atleast_1d(d)

    def nn_index(self, queries) -> np.ndarray:
        """Index of the nearest indexed point for each query (ties: lowest index)."""
        q = as_cloud(queries)
        d, idx = self.tree.query(q, k=2 if len(self.points) > 1 else 1)
        if len(self.points) == 1:
            return np.zeros(len(q), dtype=np.int64)
        # the two nearest suffice unless they tie exactly; re-rank those few
        out = idx[:, 0].astype(np.int64)
        tied = np.flatnonzero(d[:, 0] == d[:, 1])
        for t in tied:
            out[t] = self.knn(q[t], 1)[0]
        return out


def knn(index: SpatialIndex, query, k: int) -> np.ndarray:
    return index.knn(query, k)


def viewpoint_crop(points, viewpoint, n_remove: int) -> np.ndarray:
    """Drop the n_remove points farthest from `viewpoint` (ties: lowest index
    removed first); survivors keep their relative order."""
    pts = as_cloud(points)
    n = len(pts)
    if not 0 <= n_remove < n:
        raise ContractViolation(f"viewpoint_crop needs 0 <= n_remove < {n}, got {n_remove}")
    keep = np.ones(n, dtype=bool)
    keep[farthest_indices(pts, viewpoint, n_remove)] = False
    return pts[keep]


def farthest_indices(points, viewpoint, n: int) -> np.ndarray:
    """Indices of the n points farthest from `viewpoint`, farthest first,
    equal distances ordered by lowest index."""
    pts = as_cloud(points)
    vp = np.asarray(viewpoint, dtype=np.float64).reshape(3)
    d2 = ((pts - vp) ** 2).sum(axis=1)
    order = np.lexsort((np.arange(len(pts)), -d2))
    return order[:n]


def random_downsample(points, n: int, stream: Stream | int) -> np.ndarray:
    """Uniform subsample without replacement; deterministic given the stream."""
    pts = as_cloud(points)
    if not 1 <= n <= len(pts):
        raise ContractViolation(f"downsample needs 1 <= n <= {len(pts)}, got {n}")
    if isinstance(stream, int):
        stream = Stream(stream, "downsample")
    return pts[stream.sample_indices(len(pts), n)]
