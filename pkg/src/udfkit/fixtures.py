"""Analytic shapes with closed-form unsigned distances, used as test oracles.

Every shape lives inside the unit box ``[-0.5, 0.5]^3``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Tuple

import numpy as np
import torch

from .geometry import PointCloud

KINDS = ("plane", "sphere", "half-sphere", "two-parallel-planes", "torus")

_DEFAULTS = {
    "plane": {"half_extent": 0.5},
    "sphere": {"radius": 0.4},
    "half-sphere": {"radius": 0.4},
    "two-parallel-planes": {"gap": 0.4, "half_extent": 0.5},
    "torus": {"major": 0.3, "minor": 0.1},
}

# points within this distance of a cut locus are flagged
_CUT_TOL = 1e-9


@dataclass(frozen=True)
class AnalyticShape:
    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown shape kind {self.kind!r}; expected one of {KINDS}")
        merged = dict(_DEFAULTS[self.kind])
        merged.update(self.params)
        object.__setattr__(self, "params", merged)

    def __getitem__(self, key):
        return self.params[key]

    def torch_field(self):
        """Exact UDF as a differentiable torch callable, usable in place of a network."""
        return _TorchUdf(self)


def shape(kind: str, **params) -> AnalyticShape:
    return AnalyticShape(kind, params)


def _unit(v, length):
    safe = np.where(length > 0, length, 1.0)
    return np.where((length > 0)[..., None], v / safe[..., None], 0.0)


def exact_udf(shape: AnalyticShape, q) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Closed-form distance, gradient and cut-locus flag at ``(M, 3)`` points.

    Gradients are zero where the flag is set.  On the surface itself the
    one-sided (outward) gradient is returned.
    """
    q = np.asarray(q, dtype=np.float64)
    single = q.ndim == 1
    q = q.reshape(-1, 3)
    x, y, z = q[:, 0], q[:, 1], q[:, 2]
    kind = shape.kind
    if kind == "plane":
        dist = np.abs(z)
        grad = np.zeros_like(q)
        grad[:, 2] = np.where(z >= 0, 1.0, -1.0)
        cut = np.zeros(len(q), dtype=bool)
    elif kind == "two-parallel-planes":
        h = 0.5 * shape["gap"]
        upper = z >= 0
        off = np.where(upper, z - h, z + h)
        dist = np.abs(off)
        grad = np.zeros_like(q)
        grad[:, 2] = np.where(off >= 0, 1.0, -1.0)
        cut = np.abs(z) <= _CUT_TOL
    elif kind == "sphere":
        r = shape["radius"]
        rho = np.linalg.norm(q, axis=1)
        s = rho - r
        dist = np.abs(s)
        sign = np.where(s >= 0, 1.0, -1.0)
        grad = sign[:, None] * _unit(q, rho)
        cut = rho <= _CUT_TOL
    elif kind == "half-sphere":
        r = shape["radius"]
        rho = np.linalg.norm(q, axis=1)
        s = rho - r
        d_cap = np.abs(s)
        g_cap = np.where(s >= 0, 1.0, -1.0)[:, None] * _unit(q, rho)
        horiz = np.hypot(x, y)
        rim = np.stack([r * x, r * y, np.zeros_like(x)], axis=1)
        rim = np.where((horiz > 0)[:, None], rim / np.where(horiz > 0, horiz, 1.0)[:, None], 0.0)
        to_rim = q - rim
        d_rim = np.linalg.norm(to_rim, axis=1)
        g_rim = _unit(to_rim, d_rim)
        below = z < 0
        dist = np.where(below, np.sqrt((horiz - r) ** 2 + z ** 2), d_cap)
        grad = np.where(below[:, None], g_rim, g_cap)
        cut = (rho <= _CUT_TOL) | (below & (horiz <= _CUT_TOL))
    elif kind == "torus":
        R, r = shape["major"], shape["minor"]
        horiz = np.hypot(x, y)
        tube = np.sqrt((horiz - R) ** 2 + z ** 2)
        s = tube - r
        dist = np.abs(s)
        # direction from the core circle to q
        core = np.stack([R * x, R * y, np.zeros_like(x)], axis=1)
        core = core / np.where(horiz > 0, horiz, 1.0)[:, None]
        g = _unit(q - core, tube)
        grad = np.where(s >= 0, 1.0, -1.0)[:, None] * g
        cut = (tube <= _CUT_TOL) | (horiz <= _CUT_TOL)
    else:  # pragma: no cover - guarded in __post_init__
        raise ValueError(kind)
    grad = np.where(cut[:, None], 0.0, grad)
    if single:
        return dist[0], grad[0], cut[0]
    return dist, grad, cut


def _safe_sqrt(x):
    # d/dx vanishes below the clamp, so sqrt(0) yields a zero gradient instead of NaN
    return torch.sqrt(torch.clamp(x, min=1e-300))


class _TorchUdf:
    """Torch version of :func:`exact_udf`; ``abs`` is realised as ``s * sign(s)``
    with the sign held constant so the on-surface gradient is one-sided.
    Square roots are clamped away from zero so cut-locus points get a zero gradient."""

    def __init__(self, shape: AnalyticShape):
        self.shape = shape
        self.dtype = torch.float64

    def __call__(self, q):
        x, y, z = q[:, 0], q[:, 1], q[:, 2]
        kind = self.shape.kind
        if kind == "plane":
            s = z
        elif kind == "two-parallel-planes":
            h = 0.5 * self.shape["gap"]
            s = torch.where(z >= 0, z - h, z + h)
        elif kind == "sphere":
            s = _safe_sqrt(torch.sum(q * q, dim=1)) - self.shape["radius"]
        elif kind == "half-sphere":
            r = self.shape["radius"]
            cap = _safe_sqrt(torch.sum(q * q, dim=1)) - r
            horiz = _safe_sqrt(x * x + y * y)
            rim = _safe_sqrt((horiz - r) ** 2 + z * z)
            s = torch.where(z < 0, rim, cap)
        elif kind == "torus":
            R, r = self.shape["major"], self.shape["minor"]
            horiz = _safe_sqrt(x * x + y * y)
            s = _safe_sqrt((horiz - R) ** 2 + z * z) - r
        else:  # pragma: no cover
            raise ValueError(kind)
        sign = torch.where(s >= 0, 1.0, -1.0).to(s.dtype).detach()
        return s * sign


def sample_surface(shape: AnalyticShape, count: int, seed: int = 0, noise: float = 0.0) -> PointCloud:
    """Area-uniform samples of the surface; ``noise`` adds isotropic Gaussian jitter."""
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(seed)
    kind = shape.kind
    if kind == "sphere":
        pts = _sphere_dirs(rng, count) * shape["radius"]
    elif kind == "half-sphere":
        d = _sphere_dirs(rng, count)
        d[:, 2] = np.abs(d[:, 2])
        pts = d * shape["radius"]
    elif kind == "plane":
        a = shape["half_extent"]
        pts = np.zeros((count, 3))
        pts[:, :2] = rng.uniform(-a, a, size=(count, 2))
    elif kind == "two-parallel-planes":
        a = shape["half_extent"]
        pts = np.zeros((count, 3))
        pts[:, :2] = rng.uniform(-a, a, size=(count, 2))
        pts[:, 2] = np.where(np.arange(count) % 2 == 0, 0.5, -0.5) * shape["gap"]
    elif kind == "torus":
        pts = _torus_samples(rng, count, shape["major"], shape["minor"])
    else:  # pragma: no cover
        raise ValueError(kind)
    if noise > 0:
        pts = pts + rng.normal(scale=noise, size=pts.shape)
    return PointCloud(pts)


def _sphere_dirs(rng, count):
    v = rng.normal(size=(count, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _torus_samples(rng, count, R, r):
    # tube angle density is proportional to (R + r cos v); rejection-sample it
    out = []
    need = count
    while need > 0:
        n = max(2 * need, 64)
        v = rng.uniform(0, 2 * np.pi, n)
        accept = rng.uniform(0, R + r, n) < R + r * np.cos(v)
        v = v[accept][:need]
        u = rng.uniform(0, 2 * np.pi, len(v))
        ring = R + r * np.cos(v)
        out.append(np.stack([ring * np.cos(u), ring * np.sin(u), r * np.sin(v)], axis=1))
        need -= len(v)
    return np.concatenate(out)[:count]


def surface_distance(shape: AnalyticShape, points) -> np.ndarray:
    """Exact unsigned distance from each point to the analytic surface."""
    d, _, _ = exact_udf(shape, np.asarray(points, dtype=np.float64).reshape(-1, 3))
    return np.atleast_1d(d)


def true_normals(shape: AnalyticShape, points) -> np.ndarray:
    """Unit normals at (near-)surface points, sign arbitrary."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    kind = shape.kind
    if kind in ("plane", "two-parallel-planes"):
        n = np.zeros_like(pts)
        n[:, 2] = 1.0
        return n
    if kind in ("sphere", "half-sphere"):
        return pts / np.linalg.norm(pts, axis=1, keepdims=True)
    R = shape["major"]
    horiz = np.hypot(pts[:, 0], pts[:, 1])
    core = np.stack([R * pts[:, 0] / horiz, R * pts[:, 1] / horiz, np.zeros(len(pts))], axis=1)
    d = pts - core
    return d / np.linalg.norm(d, axis=1, keepdims=True)
