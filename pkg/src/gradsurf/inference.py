"""Products of a trained field: aggregated oriented normals, denoised points, meshes."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
from skimage import measure

from .errors import ConfigInvalid, EmptyLevelSet
from .field import unit_normals
from .geometry import NeighborIndex, PointCloud, build_index, sample_queries
from .losses import averaged_normal

AGGREGATED = "aggregated"
RAW_GRADIENT = "raw-gradient"


@dataclass(frozen=True)
class AggregationConfig:
    kappa: int = 8
    theta: float = math.pi / 12
    use_query_augmentation: bool = True
    aggregate: bool = True
    query_count: int = 5000
    outward: bool = True

    def validate(self):
        if self.kappa < 1:
            raise ConfigInvalid(f"kappa must be >= 1, got {self.kappa}")
        if not 0 < self.theta < math.pi:
            raise ConfigInvalid(f"theta must lie in (0, pi), got {self.theta}")
        if self.query_count < 1:
            raise ConfigInvalid("query_count must be >= 1")


@dataclass
class OrientedNormals:
    normals: np.ndarray
    provenance: np.ndarray      # per point: AGGREGATED or RAW_GRADIENT
    degenerate_count: int = 0

    def __len__(self):
        return len(self.normals)


def _field_dtype(field):
    return getattr(field, "dtype", torch.float64)


def _field_sign(field) -> float:
    cfg = getattr(field, "config", None)
    return 1.0 if cfg is None or cfg.inside_positive else -1.0


def projected_normals(field, points, chunk: int = 16384):
    """For each point: f(p), the raw unit gradient n_p and the averaged normal
    (n_p + n_p')/|n_p + n_p'| with p' = p - f(p) n_p.

    Returns (values, raw normals, averaged normals, degenerate mask) as numpy.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    vals, raw, avg, deg = [np.zeros(0)], [np.zeros((0, 3))], [np.zeros((0, 3))], [np.zeros(0, bool)]
    with torch.no_grad():
        for s in range(0, len(pts), chunk):
            x = torch.from_numpy(pts[s:s + chunk]).to(_field_dtype(field))
            v, g = field(x)
            n, d = unit_normals(g)
            _, g2 = field(x - v.unsqueeze(-1) * n)
            n2, _ = unit_normals(g2)
            n_bar, _ = averaged_normal(n, n2)
            vals.append(v.double().numpy())
            raw.append(n.double().numpy())
            avg.append(n_bar.double().numpy())
            deg.append(d.numpy())
    return np.concatenate(vals), np.concatenate(raw), np.concatenate(avg), np.concatenate(deg)


def aggregation_weights(distances, neighbor_normals, center_normal, theta: float):
    """mu = exp(-delta - ((1 - n'.n) / (1 - cos theta))^2); broadcasting over the last axis."""
    cos = np.sum(np.asarray(neighbor_normals) * np.asarray(center_normal), axis=-1)
    phi = ((1.0 - cos) / (1.0 - math.cos(theta))) ** 2
    return np.exp(-np.asarray(distances) - phi)


def aggregate_normals(points, point_normals, pool_points, pool_normals, kappa: int, theta: float,
                      self_in_pool: bool = True):
    """Weighted neighbor aggregation; returns unit vectors, one per point.

    The aggregate is (n_p + sum_i mu_i n_i) / (kappa + 1), then renormalized. When
    `self_in_pool`, point i sits at pool index i and is excluded from its neighbors.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n_p = np.asarray(point_normals, dtype=np.float64).reshape(-1, 3)
    pool = NeighborIndex(pool_points)
    pool_n = np.asarray(pool_normals, dtype=np.float64).reshape(-1, 3)
    k = min(kappa + (1 if self_in_pool else 0), pool.source_size)
    dist, idx = pool.knn(pts, k)
    if self_in_pool:
        m = len(pts)
        is_self = idx == np.arange(m)[:, None]
        missing = ~is_self.any(1)
        is_self[missing, -1] = True
        drop = np.argmax(is_self, axis=1)
        keep = np.ones_like(is_self)
        keep[np.arange(m), drop] = False
        dist = dist[keep].reshape(m, k - 1)
        idx = idx[keep].reshape(m, k - 1)
    nb = pool_n[idx]
    mu = aggregation_weights(dist, nb, n_p[:, None, :], theta)
    agg = (n_p + np.einsum("mk,mkd->md", mu, nb)) / (kappa + 1)
    norm = np.linalg.norm(agg, axis=1, keepdims=True)
    ok = norm[:, 0] > 1e-300
    out = n_p.copy()
    out[ok] = agg[ok] / norm[ok]
    return out


def infer_normals(field, cloud: PointCloud, queries=None, config: AggregationConfig = AggregationConfig(),
                  xi: int = 25, seed: int = 0) -> OrientedNormals:
    """Oriented normals for every raw point.

    `queries` (array or QueryBatch) extends the neighbor pool; when None and query
    augmentation is on, a fresh batch of `config.query_count` is sampled with `seed`.
    """
    config.validate()
    vals, raw, avg, deg = projected_normals(field, cloud.points)
    sign = -_field_sign(field) if config.outward else _field_sign(field)
    prov = np.full(len(cloud), AGGREGATED, dtype=object)
    if not config.aggregate:
        prov[:] = RAW_GRADIENT
        return OrientedNormals(sign * raw, prov, int(deg.sum()))
    pool_pts, pool_n = cloud.points, avg
    if config.use_query_augmentation:
        if queries is None:
            index = build_index(cloud.points)
            queries = sample_queries(cloud, index, config.query_count, min(xi, len(cloud) - 1),
                                     seed, label="inference-queries").queries
        q = getattr(queries, "queries", queries)
        q = np.asarray(q, dtype=np.float64).reshape(-1, 3)
        _, _, q_avg, q_deg = projected_normals(field, q)
        pool_pts = np.vstack([cloud.points, q])
        pool_n = np.vstack([avg, q_avg])
        deg_total = int(deg.sum()) + int(q_deg.sum())
    else:
        deg_total = int(deg.sum())
    normals = aggregate_normals(cloud.points, avg, pool_pts, pool_n, config.kappa, config.theta)
    prov[deg] = RAW_GRADIENT
    return OrientedNormals(sign * normals, prov, deg_total)


def denoise(field, cloud: PointCloud, rounds: int = 1, chunk: int = 16384) -> PointCloud:
    """Move every point by p - f(p) n_p, `rounds` times."""
    pts = cloud.points.copy()
    for _ in range(rounds):
        out = []
        with torch.no_grad():
            for s in range(0, len(pts), chunk):
                x = torch.from_numpy(pts[s:s + chunk]).to(_field_dtype(field))
                v, g = field(x)
                n, _ = unit_normals(g)
                out.append((x - v.unsqueeze(-1) * n).double().numpy())
        pts = np.concatenate(out) if out else pts
    return PointCloud(pts, cloud.gt_normals, cloud.name)


@dataclass(frozen=True)
class MeshGrid:
    resolution: tuple = (256,)
    bounds: tuple = (-1.1, 1.1)

    @property
    def shape(self) -> tuple:
        r = tuple(int(v) for v in self.resolution)
        return r * 3 if len(r) == 1 else r

    @property
    def box(self):
        b = tuple(float(v) for v in self.bounds)
        if len(b) == 2:
            return np.full(3, b[0]), np.full(3, b[1])
        return np.array(b[:3]), np.array(b[3:])

    def validate(self):
        if len(tuple(self.resolution)) not in (1, 3) or min(self.shape) < 8:
            raise ConfigInvalid(f"mesh resolution must be 1 or 3 ints >= 8, got {self.resolution}")
        if len(tuple(self.bounds)) not in (2, 6):
            raise ConfigInvalid("mesh bounds need 2 or 6 numbers")
        lo, hi = self.box
        if not np.all(hi > lo):
            raise ConfigInvalid("mesh bounds must have hi > lo on every axis")

    def axes(self):
        lo, hi = self.box
        return [np.linspace(lo[a], hi[a], self.shape[a]) for a in range(3)]

    @property
    def spacing(self) -> np.ndarray:
        lo, hi = self.box
        return (hi - lo) / (np.array(self.shape) - 1)


@dataclass
class TriangleMesh:
    vertices: np.ndarray
    faces: np.ndarray

    def edges(self) -> np.ndarray:
        e = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]])
        return np.unique(np.sort(e, axis=1), axis=0)

    def euler_characteristic(self) -> int:
        used = np.unique(self.faces)
        return int(len(used) - len(self.edges()) + len(self.faces))

    def face_normals(self, unit=True) -> np.ndarray:
        v = self.vertices
        n = np.cross(v[self.faces[:, 1]] - v[self.faces[:, 0]], v[self.faces[:, 2]] - v[self.faces[:, 0]])
        if unit:
            n = n / np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-300)
        return n

    def face_areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self.face_normals(unit=False), axis=1)

    def vertex_normals(self) -> np.ndarray:
        acc = np.zeros_like(self.vertices)
        fn = self.face_normals(unit=False)
        for c in range(3):
            np.add.at(acc, self.faces[:, c], fn)
        return acc / np.maximum(np.linalg.norm(acc, axis=1, keepdims=True), 1e-300)

    def transformed(self, transform) -> "TriangleMesh":
        return TriangleMesh(transform.inverse(self.vertices), self.faces.copy())


def weld(vertices, faces, tol: float = 1e-9, min_area: float = 0.0) -> TriangleMesh:
    """Merge vertices closer than `tol` (by quantization), then drop faces with
    repeated indices or area <= `min_area`, and unreferenced vertices.

    Marching cubes emits legitimate slivers far below 1e-12 in area; a positive
    `min_area` opens holes and breaks the Euler characteristic.
    """
    v = np.asarray(vertices, dtype=np.float64)
    f = np.asarray(faces, dtype=np.int64)
    keys = np.round(v / tol).astype(np.int64)
    _, first, inverse = np.unique(keys, axis=0, return_index=True, return_inverse=True)
    inverse = inverse.reshape(-1)
    v = v[first]
    f = inverse[f]
    ok = (f[:, 0] != f[:, 1]) & (f[:, 1] != f[:, 2]) & (f[:, 0] != f[:, 2])
    f = f[ok]
    area = 0.5 * np.linalg.norm(np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]]), axis=1)
    f = f[area > min_area]
    used, remap = np.unique(f, return_inverse=True)
    return TriangleMesh(v[used], remap.reshape(-1, 3))


def sample_grid(field, grid: MeshGrid, chunk: int = 262144) -> np.ndarray:
    xs, ys, zs = grid.axes()
    nx, ny, nz = grid.shape
    out = np.empty((nx, ny, nz))
    value = getattr(field, "value", None)
    dtype = _field_dtype(field)
    yz = np.stack(np.meshgrid(ys, zs, indexing="ij"), -1).reshape(-1, 2)
    slabs = max(1, chunk // len(yz))
    with torch.no_grad():
        for i in range(0, nx, slabs):
            xi = xs[i:i + slabs]
            pts = np.hstack([np.repeat(xi, len(yz))[:, None], np.tile(yz, (len(xi), 1))])
            t = torch.from_numpy(pts).to(dtype)
            v = value(t) if value is not None else field(t)[0]
            out[i:i + len(xi)] = v.double().numpy().reshape(len(xi), ny, nz)
    return out


def extract_mesh(field, grid: MeshGrid = MeshGrid(), volume: Optional[np.ndarray] = None) -> TriangleMesh:
    """Zero level set via classic marching cubes (linear edge interpolation), welded.

    Faces wind so their normals point toward decreasing field values.
    """
    grid.validate()
    vol = sample_grid(field, grid) if volume is None else volume
    if not (np.nanmin(vol) < 0.0 < np.nanmax(vol)):
        raise EmptyLevelSet("field does not change sign inside the grid")
    lo, _ = grid.box
    verts, faces, _, _ = measure.marching_cubes(vol, level=0.0, spacing=tuple(grid.spacing),
                                                method="lorensen", allow_degenerate=False)
    # skimage winds toward increasing values; flip toward decreasing f
    faces = faces[:, [0, 2, 1]]
    tol = 1e-9 * float(np.max(grid.spacing))
    return weld(verts + lo, faces, tol=tol)
