"""Analytic shapes used as desk-scale oracles.

Signed distances follow the package convention: positive inside, negative outside.
`normal` returns the outward unit normal (the usual ground-truth convention).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .geometry import PointCloud
from .seeding import rng as make_rng

SHAPES = ("sphere", "torus", "plane", "cube")


def _t_norm(v, eps=0.0):
    return torch.sqrt((v * v).sum(-1) + eps)


@dataclass(frozen=True)
class SyntheticShape:
    kind: str
    radius: float = 1.0        # sphere radius
    major: float = 0.7         # torus ring radius
    minor: float = 0.3         # torus tube radius
    half: float = 0.8          # cube half-size / plane half-extent

    def __post_init__(self):
        if self.kind not in SHAPES:
            raise ValueError(f"unknown shape {self.kind!r}; choose from {SHAPES}")

    @property
    def closed(self) -> bool:
        return self.kind != "plane"

    def sdf_torch(self, x: torch.Tensor) -> torch.Tensor:
        if self.kind == "sphere":
            return self.radius - _t_norm(x)
        if self.kind == "torus":
            ring = _t_norm(x[:, :2]) - self.major
            return self.minor - torch.sqrt(ring * ring + x[:, 2] * x[:, 2])
        if self.kind == "plane":
            return -x[:, 2]
        q = x.abs() - self.half
        outside = _t_norm(torch.clamp(q, min=0.0))
        inside = torch.clamp(q.max(dim=1).values, max=0.0)
        return -(outside + inside)

    def sdf(self, x) -> np.ndarray:
        x = torch.as_tensor(np.asarray(x, dtype=np.float64).reshape(-1, 3))
        return self.sdf_torch(x).numpy()

    def normal(self, x) -> np.ndarray:
        """Outward unit normal at (or near) the surface."""
        x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
        if self.kind == "sphere":
            n = x.copy()
        elif self.kind == "torus":
            rho = np.linalg.norm(x[:, :2], axis=1, keepdims=True)
            ring = x[:, :2] / np.maximum(rho, 1e-300) * self.major
            n = x - np.hstack([ring, np.zeros((len(x), 1))])
        elif self.kind == "plane":
            n = np.tile([0.0, 0.0, 1.0], (len(x), 1))
        else:
            a = np.abs(x)
            axis = np.argmax(a, axis=1)
            n = np.zeros_like(x)
            n[np.arange(len(x)), axis] = np.sign(x[np.arange(len(x)), axis])
        return n / np.linalg.norm(n, axis=1, keepdims=True)

    def sample(self, count: int, seed: int = 0) -> np.ndarray:
        """Area-uniform surface samples."""
        gen = make_rng(seed, f"shape-{self.kind}")
        if self.kind == "sphere":
            v = gen.standard_normal((count, 3))
            return self.radius * v / np.linalg.norm(v, axis=1, keepdims=True)
        if self.kind == "torus":
            out = np.empty((0, 3))
            while len(out) < count:
                u = gen.uniform(0, 2 * np.pi, 2 * count)
                w = gen.uniform(0, 2 * np.pi, 2 * count)
                # density proportional to the local ring radius
                keep = gen.uniform(0, 1, 2 * count) < (self.major + self.minor * np.cos(w)) / (self.major + self.minor)
                u, w = u[keep], w[keep]
                rr = self.major + self.minor * np.cos(w)
                pts = np.stack([rr * np.cos(u), rr * np.sin(u), self.minor * np.sin(w)], 1)
                out = np.vstack([out, pts])
            return out[:count]
        if self.kind == "plane":
            xy = gen.uniform(-self.half, self.half, (count, 2))
            return np.hstack([xy, np.zeros((count, 1))])
        face = gen.integers(0, 6, count)
        uv = gen.uniform(-self.half, self.half, (count, 2))
        pts = np.empty((count, 3))
        axis = face // 2
        sign = np.where(face % 2 == 0, 1.0, -1.0)
        for a in range(3):
            sel = axis == a
            others = [b for b in range(3) if b != a]
            pts[sel, a] = sign[sel] * self.half
            pts[sel, others[0]] = uv[sel, 0]
            pts[sel, others[1]] = uv[sel, 1]
        return pts

    def cloud(self, count: int, seed: int = 0) -> PointCloud:
        pts = self.sample(count, seed)
        return PointCloud(pts, self.normal(pts), name=self.kind)

    def field(self) -> "AnalyticField":
        return AnalyticField(self.sdf_torch)


class AnalyticField:
    """Field callable with the same (value, grad) protocol as FieldNetwork; no parameters."""

    def __init__(self, sdf, dtype=torch.float64):
        self.sdf = sdf
        self.dtype = dtype

    def __call__(self, x: torch.Tensor):
        x = x.to(self.dtype)
        with torch.enable_grad():
            xg = x if x.requires_grad else x.detach().requires_grad_(True)
            v = self.sdf(xg)
            (g,) = torch.autograd.grad(v.sum(), xg, create_graph=x.requires_grad)
        if not x.requires_grad:
            v, g = v.detach(), g.detach()
        return v, g

    def value(self, x: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            return self.sdf(x.to(self.dtype))

    def parameters(self):
        return iter(())


def sphere_field(radius: float = 1.0, center=(0.0, 0.0, 0.0)) -> AnalyticField:
    c = torch.tensor(center, dtype=torch.float64)
    return AnalyticField(lambda x: radius - _t_norm(x - c))


def constant_field(c: float) -> AnalyticField:
    return AnalyticField(lambda x: c + 0.0 * x[:, 0] + 0.0 * x[:, 1])
