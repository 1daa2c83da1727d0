"""Point clouds, normalization, exact kNN and Gaussian query sampling."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegenerateCloud, InvalidXi
from .seeding import rng as make_rng

MIN_POINTS = 4
MIN_SIGMA = 1e-6


@dataclass
class PointCloud:
    points: np.ndarray
    gt_normals: Optional[np.ndarray] = None
    name: str = "cloud"

    def __post_init__(self):
        self.points = np.ascontiguousarray(self.points, dtype=np.float64).reshape(-1, 3)
        if self.gt_normals is not None:
            n = np.asarray(self.gt_normals, dtype=np.float64).reshape(-1, 3)
            if len(n) != len(self.points):
                raise ValueError(f"{len(n)} normals for {len(self.points)} points")
            norms = np.linalg.norm(n, axis=1, keepdims=True)
            # stored normalized; zero rows stay zero and are flagged by callers
            self.gt_normals = np.divide(n, norms, out=np.zeros_like(n), where=norms > 0)

    def __len__(self):
        return len(self.points)

    def subset(self, mask_or_idx, name=None) -> "PointCloud":
        gt = None if self.gt_normals is None else self.gt_normals[mask_or_idx]
        return PointCloud(self.points[mask_or_idx], gt, name or self.name)

    @property
    def diagonal(self) -> float:
        lo, hi = self.points.min(0), self.points.max(0)
        return float(np.linalg.norm(hi - lo))


@dataclass(frozen=True)
class NormalizationTransform:
    """Maps original coordinates x to model units (x - center) / scale."""

    center: np.ndarray
    scale: float

    def apply(self, x):
        return (np.asarray(x, dtype=np.float64) - self.center) / self.scale

    def inverse(self, y):
        return np.asarray(y, dtype=np.float64) * self.scale + self.center

    @classmethod
    def identity(cls):
        return cls(np.zeros(3), 1.0)


def normalize(cloud: PointCloud):
    """Center on the bounding-box center and scale the largest half-extent to 1."""
    if len(cloud) < MIN_POINTS:
        raise DegenerateCloud(f"need at least {MIN_POINTS} points, got {len(cloud)}")
    pts = cloud.points
    if not np.all(np.isfinite(pts)):
        raise DegenerateCloud("cloud contains non-finite coordinates")
    lo, hi = pts.min(0), pts.max(0)
    center = 0.5 * (lo + hi)
    half = 0.5 * float(np.max(hi - lo))
    if not half > 0:
        raise DegenerateCloud("all points coincide (zero bounding-box diagonal)")
    tf = NormalizationTransform(center, half)
    out = PointCloud(tf.apply(pts), cloud.gt_normals, cloud.name)
    # uniform scaling leaves normals unchanged
    return out, tf


class NeighborIndex:
    """Exact k-nearest-neighbor index over a fixed point set.

    Results are sorted by distance; ties keep ascending source index.
    """

    def __init__(self, points):
        self.points = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
        if len(self.points) == 0:
            raise ValueError("cannot index an empty point set")
        self._tree = cKDTree(self.points)

    @property
    def source_size(self) -> int:
        return len(self.points)

    def knn(self, queries, k: int):
        """Return (distances, indices), each of shape (M, k)."""
        q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        k = int(k)
        if not 1 <= k <= self.source_size:
            raise ValueError(f"k={k} outside [1, {self.source_size}]")
        dist, idx = self._tree.query(q, k=k)
        dist = np.asarray(dist).reshape(len(q), k)
        idx = np.asarray(idx).reshape(len(q), k)
        if k > 1:
            order = np.lexsort((idx, dist), axis=1)
            dist = np.take_along_axis(dist, order, 1)
            idx = np.take_along_axis(idx, order, 1)
        return dist, idx

    def nearest(self, queries):
        d, i = self.knn(queries, 1)
        return d[:, 0], i[:, 0]


def build_index(points) -> NeighborIndex:
    return NeighborIndex(points)


def neighbor_distance(index: NeighborIndex, xi: int) -> np.ndarray:
    """Distance from every indexed point to its xi-th nearest neighbor, self excluded."""
    n = index.source_size
    if xi < 1 or xi >= n:
        raise InvalidXi(f"xi={xi} must satisfy 1 <= xi < N={n}")
    k = xi + 1
    dist, idx = index.knn(index.points, k)
    own = np.arange(n)[:, None]
    is_self = idx == own
    # when self is missing (heavy duplication) drop the last column instead
    missing = ~is_self.any(1)
    is_self[missing, -1] = True
    first = np.argmax(is_self, axis=1)
    keep = np.ones_like(is_self)
    keep[np.arange(n), first] = False
    rest = dist[keep].reshape(n, xi)
    return np.maximum(rest[:, xi - 1], MIN_SIGMA)


@dataclass
class QueryBatch:
    queries: np.ndarray
    sigmas: np.ndarray
    source_indices: np.ndarray
    cache: dict = field(default_factory=dict, repr=False)

    def __len__(self):
        return len(self.queries)


def sample_queries(cloud: PointCloud, index: NeighborIndex, count: int, xi: int,
                   rng_seed: int, sigmas=None, label: str = "queries", step: int = 0) -> QueryBatch:
    """Draw `count` queries p + N(0, sigma_p^2 I) around uniformly chosen raw points.

    Source points are drawn without replacement when count <= N, otherwise with
    replacement. `sigmas` may carry a precomputed `neighbor_distance(index, xi)`.
    """
    n = len(cloud)
    if xi >= n or xi < 1:
        raise InvalidXi(f"xi={xi} must satisfy 1 <= xi < N={n}")
    if count < 1:
        raise ValueError("count must be >= 1")
    if sigmas is None:
        sigmas = neighbor_distance(index, xi)
    gen = make_rng(rng_seed, label, step)
    if count <= n:
        src = gen.choice(n, size=count, replace=False)
    else:
        src = gen.integers(0, n, size=count)
    sig = sigmas[src]
    eps = gen.standard_normal((count, 3)) * sig[:, None]
    return QueryBatch(cloud.points[src] + eps, sig.copy(), src.astype(np.int64))


def local_offset(q, index: NeighborIndex, K: int) -> np.ndarray:
    """q minus the centroid of its K nearest indexed points. Accepts (3,) or (M, 3)."""
    q = np.asarray(q, dtype=np.float64)
    single = q.ndim == 1
    qq = q.reshape(-1, 3)
    _, idx = index.knn(qq, K)
    out = qq - index.points[idx].mean(axis=1)
    return out[0] if single else out


def multiscale_offsets(q, index: NeighborIndex, scales) -> np.ndarray:
    """Offsets for every scale at once, shape (len(scales), M, 3); one kNN query at max scale."""
    qq = np.asarray(q, dtype=np.float64).reshape(-1, 3)
    kmax = max(scales)
    _, idx = index.knn(qq, kmax)
    nb = index.points[idx]
    csum = np.cumsum(nb, axis=1)
    return np.stack([qq - csum[:, k - 1] / k for k in scales])
