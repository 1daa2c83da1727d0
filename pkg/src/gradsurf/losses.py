"""Training objective: signed-distance, distance-operator, gradient-consistency and
multi-scale orientation terms, each evaluated on a query batch.

A "field" here is any callable x (B, 3) -> (value (B,), grad (B, 3)); FieldNetwork
and the analytic mocks in `synthetic` both qualify.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch

from .errors import ConfigInvalid
from .field import Tape, unit_normals
from .geometry import NeighborIndex, PointCloud, QueryBatch, multiscale_offsets

OPPOSED_EPS = 1e-9


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 0.1
    lambda2: float = 0.01
    rho: float = 60.0
    surface_sd_weight: float = 10.0

    def validate(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigInvalid("lambda1 and lambda2 must be non-negative")
        if self.rho <= 0 or self.surface_sd_weight <= 0:
            raise ConfigInvalid("rho and surface_sd_weight must be positive")


@dataclass(frozen=True)
class LossTerms:
    """Ablation switches. The distance operator splits into its plain-distance part
    (`ld`) and its two projected-distance parts (`pd`)."""

    sd: bool = True
    ld: bool = True
    pd: bool = True
    n: bool = True
    v: bool = True

    @classmethod
    def preset(cls, name: str) -> "LossTerms":
        presets = {
            "full": cls(),
            "ld_only": cls(sd=False, ld=True, pd=False, n=False, v=False),
            "no_n": cls(n=False),
            "no_v": cls(v=False),
            "no_sd": cls(sd=False),
            "no_pd": cls(pd=False),
        }
        if name not in presets:
            raise ConfigInvalid(f"unknown loss preset {name!r}; choose from {sorted(presets)}")
        return presets[name]

    def validate(self):
        if not any(asdict(self).values()):
            raise ConfigInvalid("at least one loss term must be enabled")


def scale_set(base: int = 8) -> tuple:
    """{1, base/2, base}."""
    if base < 2 or base % 2:
        raise ConfigInvalid(f"scale base must be an even integer >= 2, got {base}")
    return (1, base // 2, base)


def validate_scales(scales: Sequence[int], n_points: int | None = None):
    scales = tuple(int(k) for k in scales)
    if not scales or scales[0] < 1 or any(b <= a for a, b in zip(scales, scales[1:])):
        raise ConfigInvalid(f"scales must be strictly increasing positive ints, got {scales}")
    if n_points is not None and scales[-1] >= n_points:
        raise ConfigInvalid(f"largest scale {scales[-1]} must be < N={n_points}")
    return scales


@dataclass
class LossBreakdown:
    l_sd: float
    l_d: float
    l_n: float
    l_v: float
    total: float
    degenerate_gradient_count: int = 0

    CSV_HEADER = ("iteration", "l_sd", "l_d", "l_n", "l_v", "total", "degenerate_count")

    def csv_row(self, iteration: int) -> str:
        vals = (self.l_sd, self.l_d, self.l_n, self.l_v, self.total)
        return f"{iteration}," + ",".join(repr(float(v)) for v in vals) + f",{self.degenerate_gradient_count}"

    def is_finite(self) -> bool:
        return all(np.isfinite(v) for v in (self.l_sd, self.l_d, self.l_n, self.l_v, self.total))


def compose_total(l_sd, l_d, l_n, l_v, weights: LossWeights):
    return l_sd + l_v + weights.lambda1 * l_d + weights.lambda2 * l_n


def safe_norm(v: torch.Tensor) -> torch.Tensor:
    """Euclidean norm over the last axis with a zero (not NaN) gradient at the origin."""
    sq = (v * v).sum(-1)
    nz = sq > 0
    return torch.where(nz, torch.sqrt(torch.where(nz, sq, torch.ones_like(sq))), torch.zeros_like(sq))


@dataclass
class ProjectionRecord:
    """Batched projection q -> q' = q - f(q) n_q with normals at both ends."""

    q: torch.Tensor
    f_q: torch.Tensor
    n_q: torch.Tensor
    q_prime: torch.Tensor
    f_qprime: torch.Tensor
    n_qprime: torch.Tensor
    n_bar: torch.Tensor
    degenerate: int = 0
    opposed: int = 0


def averaged_normal(n_a: torch.Tensor, n_b: torch.Tensor):
    """(n_a + n_b)/|n_a + n_b|, falling back to n_a where the sum nearly vanishes."""
    s = n_a + n_b
    norm = s.norm(dim=-1, keepdim=True)
    opposed = norm[..., 0] < OPPOSED_EPS
    n_bar = torch.where(opposed.unsqueeze(-1), n_a, s / torch.where(opposed.unsqueeze(-1), torch.ones_like(norm), norm))
    return n_bar, int(opposed.sum())


def _as_points(field, q):
    dtype = getattr(field, "dtype", torch.float64)
    if torch.is_tensor(q):
        return q.to(dtype).reshape(-1, 3)
    return torch.as_tensor(np.asarray(q, dtype=np.float64).reshape(-1, 3)).to(dtype)


def project(field, q) -> ProjectionRecord:
    q = _as_points(field, q)
    f_q, g_q = field(q)
    n_q, deg_q = unit_normals(g_q)
    q_prime = q - f_q.unsqueeze(-1) * n_q
    f_qp, g_qp = field(q_prime)
    n_qp, deg_qp = unit_normals(g_qp)
    n_bar, opposed = averaged_normal(n_q, n_qp)
    return ProjectionRecord(q, f_q, n_q, q_prime, f_qp, n_qp, n_bar,
                            int(deg_q.sum()) + int(deg_qp.sum()), opposed)


def _sd_terms(f_p, f_q, f_qp, weight):
    return (weight * f_qp * f_qp + f_q * f_q + f_p * f_p).double().mean()


def loss_sd(field, p, q, q_prime, weight: float = 10.0) -> torch.Tensor:
    """mean of weight*f(q')^2 + f(q)^2 + f(p)^2."""
    f_p, _ = field(_as_points(field, p))
    f_q, _ = field(_as_points(field, q))
    f_qp, _ = field(_as_points(field, q_prime))
    return _sd_terms(f_p, f_q, f_qp, weight)


def distance_terms(q_prime, n_qprime, p, n_p):
    """Means of |q'-p|, and of |(q'-p).n_p| + |(q'-p).n_q'| over paired rows."""
    diff = q_prime - p
    ld = safe_norm(diff).double().mean()
    pd = ((diff * n_p).sum(-1).abs() + (diff * n_qprime).sum(-1).abs()).double().mean()
    return ld, pd


def loss_d(q_prime, n_qprime, p, n_p) -> torch.Tensor:
    ld, pd = distance_terms(q_prime, n_qprime, p, n_p)
    return ld + pd


def naive_distance(q_prime, p) -> torch.Tensor:
    """Plain mean point distance between paired rows (no projected terms)."""
    return safe_norm(q_prime - p).double().mean()


def confidence_weights(f_q: torch.Tensor, rho: float) -> torch.Tensor:
    return torch.exp(-rho * f_q.abs())


def loss_n(record: ProjectionRecord, rho: float = 60.0) -> torch.Tensor:
    """Gradient-direction disagreement between q and q', weighted by exp(-rho |f(q)|)."""
    cos = (record.n_qprime * record.n_q).sum(-1)
    # rounding can push cos a hair past 1 for unit vectors
    return ((1.0 - cos).clamp_min(0.0) * confidence_weights(record.f_q, rho)).double().mean()


def _loss_v_terms(record: ProjectionRecord, offsets: torch.Tensor) -> torch.Tensor:
    disp = record.f_q.unsqueeze(-1) * record.n_bar
    return sum(safe_norm(disp - h).double().mean() for h in offsets)


def loss_v(field, q, index: NeighborIndex, scales=(1, 4, 8), record: ProjectionRecord | None = None) -> torch.Tensor:
    """Sum over scales of mean |f(q) n_bar(q) - H_K(q)|, H_K = q - centroid of K nearest raw points."""
    if record is None:
        record = project(field, q)
    offs = multiscale_offsets(record.q.detach().double().numpy(), index, scales)
    return _loss_v_terms(record, torch.from_numpy(offs).to(record.q.dtype))


def pair_nearest(p: np.ndarray, q_prime: np.ndarray) -> np.ndarray:
    """Index of the nearest q' for every raw point p (ties: lowest index)."""
    # knn rows are ordered by (distance, index), so asking for two resolves exact ties
    _, idx = NeighborIndex(q_prime).knn(p, min(2, len(q_prime)))
    return idx[:, 0]


def _params(field):
    return list(field.parameters()) if hasattr(field, "parameters") else []


def total_loss(field, cloud: PointCloud, batch: QueryBatch, weights: LossWeights = LossWeights(),
               scales=(1, 4, 8), terms: LossTerms = LossTerms(), index: NeighborIndex | None = None):
    """Evaluate L = L_sd + L_v + lambda1 L_d + lambda2 L_n on one batch.

    Raw points reuse the batch's source indices. Returns (LossBreakdown, Tape).
    """
    if index is None:
        index = batch.cache.get("index")
    if index is None:
        index = NeighborIndex(cloud.points)
    rec = project(field, batch.queries)
    zero = torch.zeros((), dtype=torch.float64)
    degenerate = rec.degenerate + rec.opposed

    need_p = terms.sd or terms.pd or terms.ld
    if need_p:
        p = _as_points(field, cloud.points[batch.source_indices])
        f_p, g_p = field(p) if (terms.sd or terms.pd) else (None, None)
        if g_p is not None:
            n_p, deg_p = unit_normals(g_p)
            degenerate += int(deg_p.sum())

    l_sd = _sd_terms(f_p, rec.f_q, rec.f_qprime, weights.surface_sd_weight) if terms.sd else zero

    if terms.ld or terms.pd:
        # non-finite rows only need a placeholder here; the loss itself stays NaN
        qp_np = np.nan_to_num(rec.q_prime.detach().double().numpy(), nan=0.0, posinf=0.0, neginf=0.0)
        pair = torch.from_numpy(pair_nearest(cloud.points[batch.source_indices], qp_np))
        qp, nqp = rec.q_prime[pair], rec.n_qprime[pair]
        diff = qp - p
        l_ld = safe_norm(diff).double().mean() if terms.ld else zero
        if terms.pd:
            l_pd = ((diff * n_p).sum(-1).abs() + (diff * nqp).sum(-1).abs()).double().mean()
        else:
            l_pd = zero
        l_d = l_ld + l_pd
    else:
        l_d = zero

    l_n = loss_n(rec, weights.rho) if terms.n else zero

    if terms.v:
        offs = batch.cache.get("offsets")
        if offs is None:
            offs = multiscale_offsets(batch.queries, index, scales)
        l_v = _loss_v_terms(rec, torch.from_numpy(offs).to(rec.q.dtype))
    else:
        l_v = zero

    total = compose_total(l_sd, l_d, l_n, l_v, weights)
    vals = [float(t.detach()) for t in (l_sd, l_d, l_n, l_v, total)]
    breakdown = LossBreakdown(*vals, degenerate_gradient_count=degenerate)
    return breakdown, Tape(total, _params(field))
