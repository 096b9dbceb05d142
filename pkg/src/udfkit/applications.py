"""Normal estimation and upsampling from a fitted field."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import PartialOutputError
from .field import evaluate_with_gradient
from .geometry import PointCloud
from .sampler import adaptive_sigma, sample_queries

EPS_GRAD = 1e-12


@dataclass(frozen=True, eq=False)
class OrientedlessNormals:
    normals: np.ndarray      # (N, 3); zero rows where degenerate
    degenerate: np.ndarray   # (N,) bool

    @property
    def valid(self) -> np.ndarray:
        return ~self.degenerate


def estimate_normals(field, cloud: PointCloud) -> OrientedlessNormals:
    """Unit field gradients at the cloud points (sign is meaningless)."""
    _, g = evaluate_with_gradient(field, cloud.points)
    n = np.linalg.norm(g, axis=1)
    bad = n < EPS_GRAD
    normals = np.where(bad[:, None], 0.0, g / np.where(bad, 1.0, n)[:, None])
    return OrientedlessNormals(normals, bad)


@dataclass(frozen=True)
class UpsampleConfig:
    factor: int = 4
    beta: float = 0.05
    max_rounds: int = 10
    pull_steps: int = 1

    def __post_init__(self):
        if self.factor < 1:
            raise ValueError("factor must be >= 1")
        # beta = 0 is accepted: it keeps nothing and runs into the retry cap
        if not self.beta >= 0:
            raise ValueError("beta must be >= 0")
        if self.max_rounds < 1 or self.pull_steps < 1:
            raise ValueError("max_rounds and pull_steps must be >= 1")


def _pull_points(field, q, steps):
    f, g = evaluate_with_gradient(field, q)
    gn = np.linalg.norm(g, axis=1)
    ok = gn >= EPS_GRAD
    f0 = f
    cur = q
    for step in range(steps):
        if step:
            f, g = evaluate_with_gradient(field, cur)
            gn = np.linalg.norm(g, axis=1)
            ok &= gn >= EPS_GRAD
        safe = np.where(gn >= EPS_GRAD, gn, 1.0)
        cur = np.where(ok[:, None], cur - (f / safe)[:, None] * g, cur)
    return cur, f0, ok


def upsample(field, cloud: PointCloud, cfg: UpsampleConfig = UpsampleConfig(), seed: int = 0) -> PointCloud:
    """Pull ``N * factor`` Gaussian queries onto the zero level set, keeping only
    those whose query distance is below ``beta``.

    Rounds of fresh queries are drawn until enough points are kept; the output
    is the first ``N * factor`` kept points in query order.
    """
    target = len(cloud) * cfg.factor
    sigma = adaptive_sigma(cloud)
    kept = []
    count = 0
    for rnd in range(cfg.max_rounds):
        batch = sample_queries(cloud, cfg.factor, seed=seed + rnd, uniform_fraction=0.0, sigma=sigma)
        moved, f_q, ok = _pull_points(field, batch.queries, cfg.pull_steps)
        keep = ok & (f_q < cfg.beta)
        kept.append(moved[keep])
        count += int(keep.sum())
        if count >= target:
            pts = np.concatenate(kept)[:target]
            return PointCloud(pts, center=cloud.center, scale=cloud.scale)
    pts = np.concatenate(kept) if kept else np.zeros((0, 3))
    raise PartialOutputError(
        f"kept {len(pts)} of {target} points after {cfg.max_rounds} rounds (beta={cfg.beta})", pts
    )
