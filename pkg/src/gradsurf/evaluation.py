"""Normal-estimation and geometry metrics, corruption protocol, and report output."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .errors import LengthMismatch
from .geometry import PointCloud
from .io import read_normals_file, read_xyz
from .seeding import rng as make_rng

NOISE_LEVELS = {"noise_low": 0.0012, "noise_med": 0.006, "noise_high": 0.012}
PROTOCOLS = tuple(NOISE_LEVELS) + ("stripe", "gradient")
DEFAULT_THRESHOLDS = tuple(range(0, 181, 5))


def _unit(v):
    v = np.asarray(v, dtype=np.float64).reshape(-1, 3)
    n = np.linalg.norm(v, axis=1, keepdims=True)
    return np.divide(v, n, out=np.zeros_like(v), where=n > 0)


def angular_errors(est, gt, oriented: bool = True) -> np.ndarray:
    """Per-point angle in degrees; unoriented mode folds to min(a, 180 - a)."""
    est = getattr(est, "normals", est)
    e, g = _unit(est), _unit(gt)
    if len(e) != len(g):
        raise LengthMismatch(f"{len(e)} estimated vs {len(g)} reference normals")
    ang = np.degrees(np.arccos(np.clip(np.sum(e * g, axis=1), -1.0, 1.0)))
    return ang if oriented else np.minimum(ang, 180.0 - ang)


def normal_rmse(est, gt, oriented: bool = True) -> float:
    ang = angular_errors(est, gt, oriented)
    return float(np.sqrt(np.mean(ang * ang)))


def pgp_curve(est, gt, thresholds=DEFAULT_THRESHOLDS, oriented: bool = True) -> list:
    """Fraction of points whose angular error is <= each threshold (degrees)."""
    thr = np.asarray(thresholds, dtype=np.float64)
    if np.any(np.diff(thr) < 0):
        raise ValueError("thresholds must be sorted ascending")
    ang = np.sort(angular_errors(est, gt, oriented))
    return (np.searchsorted(ang, thr, side="right") / len(ang)).tolist()


def chamfer(a, b, norm: str = "L1") -> float:
    """Symmetric mean nearest-neighbor distance, averaged over both directions.

    L1 averages distances, L2 averages squared distances.
    """
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("chamfer needs two nonempty point sets")
    dab, _ = cKDTree(b).query(a)
    dba, _ = cKDTree(a).query(b)
    if norm.upper() == "L1":
        return 0.5 * (float(np.mean(dab)) + float(np.mean(dba)))
    if norm.upper() == "L2":
        return 0.5 * (float(np.mean(dab ** 2)) + float(np.mean(dba ** 2)))
    raise ValueError(f"norm must be L1 or L2, got {norm!r}")


def closest_point_on_triangles(p, a, b, c):
    """Closest points on triangles (a, b, c) to points p; all arrays (M, 3), row-paired.

    Region classification over vertices, edges and face interior.
    """
    ab, ac, ap = b - a, c - a, p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    out = np.empty_like(p)
    done = np.zeros(len(p), dtype=bool)

    def take(mask, val):
        m = mask & ~done
        out[m] = val[m] if np.ndim(val) == 2 and len(val) == len(p) else val
        done[m] = True

    take((d1 <= 0) & (d2 <= 0), a)
    take((d3 >= 0) & (d4 <= d3), b)
    with np.errstate(divide="ignore", invalid="ignore"):
        v = d1 / (d1 - d3)
        take((vc <= 0) & (d1 >= 0) & (d3 <= 0), a + v[:, None] * ab)
        take((d6 >= 0) & (d5 <= d6), c)
        w = d2 / (d2 - d6)
        take((vb <= 0) & (d2 >= 0) & (d6 <= 0), a + w[:, None] * ac)
        w2 = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        take((va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0), b + w2[:, None] * (c - b))
        denom = va + vb + vc
        vv = vb / denom
        ww = vc / denom
        inner = a + vv[:, None] * ab + ww[:, None] * ac
    take(np.ones(len(p), dtype=bool), inner)
    return out


def point_triangle_distance(p, a, b, c) -> np.ndarray:
    return np.linalg.norm(closest_point_on_triangles(p, a, b, c) - p, axis=1)


def point_to_mesh_distances(points, mesh) -> np.ndarray:
    """Exact distance from each point to the closest location on any triangle.

    Candidates come from a centroid kd-tree: a triangle can only beat the nearest
    centroid's triangle if its centroid lies within that distance plus the largest
    centroid-to-vertex radius.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    v, f = np.asarray(mesh.vertices, dtype=np.float64), np.asarray(mesh.faces)
    if len(f) == 0:
        raise ValueError("mesh has no triangles")
    tri = v[f]
    cent = tri.mean(1)
    rad = float(np.max(np.linalg.norm(tri - cent[:, None], axis=2)))
    tree = cKDTree(cent)
    _, near = tree.query(pts)
    best = point_triangle_distance(pts, *(tri[near, i] for i in range(3)))
    out = np.empty(len(pts))
    for i, (p, d0) in enumerate(zip(pts, best)):
        cand = tree.query_ball_point(p, d0 + rad + 1e-12)
        if len(cand) <= 1:
            out[i] = d0
            continue
        cand = np.asarray(cand)
        pp = np.broadcast_to(p, (len(cand), 3))
        out[i] = min(d0, float(point_triangle_distance(pp, tri[cand, 0], tri[cand, 1], tri[cand, 2]).min()))
    return out


def point_to_mesh(points, mesh) -> float:
    return float(np.mean(point_to_mesh_distances(points, mesh)))


@dataclass(frozen=True)
class CorruptionParams:
    stripe_axis: int = 1
    stripe_offsets: tuple = (-0.5, 0.0, 0.5)
    stripe_width: float = 0.1
    gradient_axis: int = 0
    gradient_min_keep: float = 0.2


def corrupt(cloud: PointCloud, protocol: str, seed: int = 0, diagonal: Optional[float] = None,
            params: CorruptionParams = CorruptionParams(), sigma_fraction: Optional[float] = None) -> PointCloud:
    """Noise modes add isotropic Gaussian noise with sigma = fraction * bounding-box diagonal;
    `stripe` removes points inside axis-aligned slabs; `gradient` keeps points with
    probability rising linearly along an axis."""
    gen = make_rng(seed, f"corrupt-{protocol}")
    pts = cloud.points
    if protocol in NOISE_LEVELS or protocol == "noise":
        frac = NOISE_LEVELS.get(protocol, 0.0) if sigma_fraction is None else sigma_fraction
        diag = cloud.diagonal if diagonal is None else diagonal
        noisy = pts + gen.standard_normal(pts.shape) * (frac * diag)
        return PointCloud(noisy, cloud.gt_normals, f"{cloud.name}_{protocol}")
    if protocol == "stripe":
        coord = pts[:, params.stripe_axis]
        inside = np.zeros(len(pts), dtype=bool)
        for c in params.stripe_offsets:
            inside |= np.abs(coord - c) < 0.5 * params.stripe_width
        return cloud.subset(~inside, f"{cloud.name}_stripe")
    if protocol == "gradient":
        coord = pts[:, params.gradient_axis]
        span = coord.max() - coord.min()
        t = (coord - coord.min()) / span if span > 0 else np.ones_like(coord)
        keep = gen.uniform(size=len(pts)) < params.gradient_min_keep + (1 - params.gradient_min_keep) * t
        return cloud.subset(keep, f"{cloud.name}_gradient")
    raise ValueError(f"unknown protocol {protocol!r}; choose from {PROTOCOLS}")


@dataclass
class EvalReport:
    rmse_oriented: Optional[float]
    rmse_unoriented: Optional[float]
    pgp: list                      # (threshold, oriented fraction, unoriented fraction)
    chamfer_l1: Optional[float] = None
    chamfer_l2: Optional[float] = None
    p2m: Optional[float] = None
    best_global_sign: int = 1
    rmse_oriented_flipped: Optional[float] = None
    per_category: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def table(self) -> str:
        rows = [("rmse_oriented_deg", self.rmse_oriented), ("rmse_unoriented_deg", self.rmse_unoriented),
                ("rmse_oriented_flipped_deg", self.rmse_oriented_flipped),
                ("best_global_sign", self.best_global_sign)]
        if self.chamfer_l1 is not None:
            rows.append(("chamfer_l1", self.chamfer_l1))
        if self.chamfer_l2 is not None:
            rows.append(("chamfer_l2_x1e4", self.chamfer_l2 * 1e4))
        if self.p2m is not None:
            rows.append(("p2m", self.p2m))
        for thr, fo, fu in self.pgp:
            if thr in (10, 20, 30, 70, 90):
                rows.append((f"pgp_{int(thr)}_oriented", fo))
                rows.append((f"pgp_{int(thr)}_unoriented", fu))
        for cat, vals in sorted(self.per_category.items()):
            for k, val in sorted(vals.items()):
                rows.append((f"{cat}.{k}", val))
        width = max(len(r[0]) for r in rows)
        fmt = lambda v: "-" if v is None else (f"{v:.6f}" if isinstance(v, float) else str(v))  # noqa: E731
        return "\n".join(f"{k:<{width}}  {fmt(v):>14}" for k, v in rows) + "\n"

    def write(self, out_dir, stem="report"):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{stem}.json").write_text(self.to_json())
        (out / f"{stem}.txt").write_text(self.table())
        with open(out / f"{stem}_pgp.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["threshold_deg", "pgp_oriented", "pgp_unoriented"])
            w.writerows(self.pgp)


def evaluate_normals(est, gt, thresholds=DEFAULT_THRESHOLDS, metadata=None) -> EvalReport:
    est = getattr(est, "normals", est)
    ro = normal_rmse(est, gt, True)
    rf = normal_rmse(-np.asarray(est), gt, True)
    ru = normal_rmse(est, gt, False)
    po = pgp_curve(est, gt, thresholds, True)
    pu = pgp_curve(est, gt, thresholds, False)
    return EvalReport(ro, ru, [(float(t), a, b) for t, a, b in zip(thresholds, po, pu)],
                      best_global_sign=1 if ro <= rf else -1, rmse_oriented_flipped=rf,
                      metadata=dict(metadata or {}))


def aggregate_reports(reports: dict) -> EvalReport:
    """Combine per-shape reports: per-shape RMSE averaged (primary) plus pooled RMSE."""
    names = sorted(reports)
    ro = float(np.mean([reports[n].rmse_oriented for n in names]))
    ru = float(np.mean([reports[n].rmse_unoriented for n in names]))
    pgp = []
    for i, row in enumerate(reports[names[0]].pgp):
        pgp.append((row[0], float(np.mean([reports[n].pgp[i][1] for n in names])),
                    float(np.mean([reports[n].pgp[i][2] for n in names]))))
    pooled_o = [reports[n].metadata.get("sum_sq_oriented") for n in names]
    meta = {"rmse_averaging": "per-shape mean", "shapes": names}
    if all(v is not None for v in pooled_o):
        count = sum(reports[n].metadata["count"] for n in names)
        meta["rmse_oriented_pooled"] = float(np.sqrt(sum(pooled_o) / count))
        meta["rmse_unoriented_pooled"] = float(
            np.sqrt(sum(reports[n].metadata["sum_sq_unoriented"] for n in names) / count))
    per = {n: {"rmse_oriented": reports[n].rmse_oriented,
               "rmse_unoriented": reports[n].rmse_unoriented} for n in names}
    return EvalReport(ro, ru, pgp, per_category=per, metadata=meta)


def pooled_stats(est, gt) -> dict:
    ao = angular_errors(est, gt, True)
    au = angular_errors(est, gt, False)
    return {"count": len(ao), "sum_sq_oriented": float(np.sum(ao ** 2)),
            "sum_sq_unoriented": float(np.sum(au ** 2))}


def load_pcpnet_dir(path, names=None):
    """Yield PointClouds from a PCPNet-style directory (`<name>.xyz` + `<name>.normals`).

    `names` defaults to `testset.txt` when present, else every `.xyz` file.
    """
    root = Path(path)
    if names is None:
        listing = root / "testset.txt"
        if listing.exists():
            names = [ln.strip() for ln in listing.read_text().splitlines() if ln.strip()]
        else:
            names = sorted(p.stem for p in root.glob("*.xyz"))
    for name in names:
        cloud = read_xyz(root / f"{name}.xyz", name=name)
        nfile = root / f"{name}.normals"
        if nfile.exists():
            normals = read_normals_file(nfile)
            cloud = PointCloud(cloud.points, normals, name)
        yield cloud
