"""Training losses for fitting an unsigned distance field without ground-truth distances.

All functions accept any ``field`` callable mapping an ``(M, 3)`` tensor to an
``(M,)`` tensor of non-negative distances: a :class:`~udfkit.field.UdfField`
or an analytic stand-in from :mod:`udfkit.fixtures`.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from typing import Optional

import numpy as np
import torch
from scipy.spatial import cKDTree

from . import diffengine as de
from .errors import EmptyBatchError, NumericFailure
from .geometry import PointCloud

EPS_GRAD = 1e-12


@dataclass(frozen=True)
class LossWeights:
    alpha1: float = 0.002   # level set projection
    alpha2: float = 0.1     # surface distance
    alpha3: float = 0.01    # gradient / nearest-point alignment
    lam: float = 10.0       # adaptive weight rate

    def __post_init__(self):
        for name in ("alpha1", "alpha2", "alpha3", "lam"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v}")
        if self.lam <= 0:
            raise ValueError("lam must be > 0")


@dataclass
class LossBreakdown:
    cd: float
    proj: float
    dist: float
    orth: float
    total: float
    skipped: dict = dc_field(default_factory=dict)


@dataclass
class Probe:
    """Field value and input gradient at a batch of queries, kept in the graph."""

    q: torch.Tensor
    values: torch.Tensor
    grads: torch.Tensor
    grad_norm: torch.Tensor
    ok: torch.Tensor

    @property
    def skipped(self) -> int:
        return int((~self.ok).sum())


def _dtype(field):
    return getattr(field, "dtype", torch.float64)


def _as_tensor(x, field):
    if isinstance(x, torch.Tensor):
        return x.to(_dtype(field))
    return torch.tensor(np.asarray(x, dtype=np.float64).reshape(-1, 3), dtype=_dtype(field))


def probe(field, queries, eps: float = EPS_GRAD, create_graph: bool = True) -> Probe:
    q = _as_tensor(queries, field).detach().requires_grad_(True)
    values, grads = de.value_and_input_gradient(field, q, create_graph=create_graph)
    if not (torch.isfinite(values).all() and torch.isfinite(grads).all()):
        raise NumericFailure("field value or gradient is non-finite at a query", node="field")
    gn = de.norm(grads)
    return Probe(q, values, grads, gn, gn >= eps)


def _pull(pr: Probe):
    gn = torch.where(pr.ok, pr.grad_norm, torch.ones_like(pr.grad_norm))
    step = (pr.values / gn)[:, None] * pr.grads
    return pr.q - step


def pull_to_surface(field, queries, eps: float = EPS_GRAD, pr: Optional[Probe] = None, steps: int = 1):
    """Move queries against the normalised gradient by the predicted distance.

    Returns ``(q_hat, ok)``.  Rows whose gradient norm is below ``eps`` are
    marked ``ok=False`` and left in place; callers drop them.  With
    ``steps > 1`` the pull is repeated from the previous result.
    """
    if pr is None:
        pr = probe(field, queries, eps)
    q_hat = _pull(pr)
    ok = pr.ok
    q_hat = torch.where(ok[:, None], q_hat, pr.q)
    for _ in range(steps - 1):
        nxt = probe(field, q_hat.detach(), eps, create_graph=False)
        moved = _pull(nxt).detach()
        ok = ok & nxt.ok
        q_hat = torch.where(ok[:, None], moved, q_hat)
    return q_hat, ok


def loss_cd(field, queries, cloud, targets=None, pr: Optional[Probe] = None, eps: float = EPS_GRAD,
            squared: bool = False, stats: Optional[dict] = None):
    """Two-sided Chamfer distance between pulled queries and the surface points.

    First term: mean over pulled queries of the distance to the closest point
    of ``cloud``.  Second term: mean over ``targets`` (default all of
    ``cloud``) of the distance to the closest pulled query.  Nearest-neighbour
    assignment is done on values; distances stay differentiable through the pull.
    """
    if pr is None:
        pr = probe(field, queries, eps)
    q_hat, ok = pull_to_surface(field, None, eps, pr=pr)
    q_hat = q_hat[ok]
    if stats is not None:
        stats["cd_skipped"] = int((~ok).sum())
    if q_hat.shape[0] == 0:
        raise EmptyBatchError("every query had a degenerate gradient")
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    tree = cloud.tree if isinstance(cloud, PointCloud) else cKDTree(pts)
    qh = q_hat.detach().to(torch.float64).numpy()
    _, i_fwd = tree.query(qh)
    tgt = pts if targets is None else np.asarray(targets, dtype=np.float64).reshape(-1, 3)
    _, i_bwd = cKDTree(qh).query(tgt)
    p_fwd = torch.as_tensor(pts[i_fwd], dtype=q_hat.dtype)
    p_bwd = torch.tensor(tgt, dtype=q_hat.dtype)
    d_fwd = de.norm(q_hat - p_fwd)
    d_bwd = de.norm(p_bwd - q_hat[torch.as_tensor(i_bwd)])
    if squared:
        d_fwd, d_bwd = d_fwd ** 2, d_bwd ** 2
    return de.mean(d_fwd) + de.mean(d_bwd)


def adaptive_weight(values, lam: float):
    """``exp(-lam * |f(q)|)`` for a tensor (or array / scalar) of field values."""
    if isinstance(values, torch.Tensor):
        return de.exp(-lam * de.absolute(values))
    return np.exp(-lam * np.abs(np.asarray(values, dtype=np.float64)))


def _abs_cos(a, b, na, nb):
    return de.absolute(de.dot(a, b) / (na * nb))


def proj_terms(g, g_hat, values=None, lam: float = 10.0):
    """Per-query ``gamma * (1 - |cos(g, g_hat)|)``; ``gamma = 1`` when ``values`` is None."""
    term = 1.0 - _abs_cos(g, g_hat, de.norm(g), de.norm(g_hat))
    if values is not None:
        term = adaptive_weight(values, lam) * term
    return term


def orth_terms(g, t):
    """Per-query ``1 - |cos(g, t)|`` with ``t = p - q``."""
    return 1.0 - _abs_cos(g, t, de.norm(g), de.norm(t))


def loss_proj(field, queries, lam: float = 10.0, pr: Optional[Probe] = None, eps: float = EPS_GRAD,
              adaptive: bool = True, detach_gamma: bool = True, full_chain: bool = False,
              create_graph: bool = True, stats: Optional[dict] = None):
    """Weighted mean of ``1 - |cos(grad f(q), grad f(q_hat))|``.

    ``q_hat`` enters as a constant location unless ``full_chain`` is set.
    ``gamma`` is treated as a constant weight unless ``detach_gamma`` is False.
    """
    if pr is None:
        pr = probe(field, queries, eps, create_graph=create_graph)
    q_hat, ok = pull_to_surface(field, None, eps, pr=pr)
    loc = q_hat if full_chain else de.stop_gradient(q_hat)
    if not full_chain:
        loc = loc.requires_grad_(True)
    _, g_hat = de.value_and_input_gradient(field, loc, create_graph=create_graph)
    n_hat = de.norm(g_hat)
    ok = ok & (n_hat >= eps)
    if stats is not None:
        stats["proj_skipped"] = int((~ok).sum())
    if not bool(ok.any()):
        return torch.zeros((), dtype=pr.values.dtype)
    g, gh = pr.grads[ok], g_hat[ok]
    term = 1.0 - _abs_cos(g, gh, pr.grad_norm[ok], n_hat[ok])
    if adaptive:
        gamma = adaptive_weight(pr.values[ok], lam)
        if detach_gamma:
            gamma = de.stop_gradient(gamma)
        term = gamma * term
    return de.mean(term)


def loss_dist(field, points):
    """Mean predicted distance at surface points."""
    p = _as_tensor(points, field)
    return de.mean(de.absolute(field(p)))


def loss_orth(field, queries, nearest_points, pr: Optional[Probe] = None, eps: float = EPS_GRAD,
              stats: Optional[dict] = None):
    """Mean of ``1 - |cos(grad f(q), p - q)|`` with ``p`` the closest cloud point (a constant)."""
    if pr is None:
        pr = probe(field, queries, eps)
    near = _as_tensor(nearest_points, field)
    t = near - pr.q.detach()
    tn = de.norm(t)
    ok = pr.ok & (tn > 0)
    if stats is not None:
        stats["orth_skipped"] = int((~ok).sum())
    if not bool(ok.any()):
        return torch.zeros((), dtype=pr.values.dtype)
    term = 1.0 - _abs_cos(pr.grads[ok], t[ok], pr.grad_norm[ok], tn[ok])
    return de.mean(term)


@dataclass(frozen=True)
class LossOptions:
    adaptive: bool = True
    detach_gamma: bool = True
    proj_full_chain: bool = False
    squared_cd: bool = False
    eps: float = EPS_GRAD


def loss_total(field, batch, cloud: PointCloud, w: LossWeights = LossWeights(), targets=None,
               dist_points=None, options: LossOptions = LossOptions()):
    """``L_cd + alpha1 L_proj + alpha2 L_dist + alpha3 L_orth`` and its breakdown.

    ``batch`` is a :class:`~udfkit.sampler.QueryBatch`.  ``targets`` restricts
    the second Chamfer term to a subset of surface points; ``dist_points``
    restricts the surface distance term.  Terms with zero weight are still
    evaluated for the breakdown but do not enter the graph.
    """
    stats: dict = {}
    pr = probe(field, batch.queries, options.eps)
    stats["degenerate"] = pr.skipped
    cd = loss_cd(field, None, cloud, targets=targets, pr=pr, eps=options.eps,
                 squared=options.squared_cd, stats=stats)
    proj = loss_proj(field, None, w.lam, pr=pr, eps=options.eps, adaptive=options.adaptive,
                     detach_gamma=options.detach_gamma, full_chain=options.proj_full_chain,
                     create_graph=w.alpha1 > 0, stats=stats)
    if dist_points is None:
        dist_points = cloud.points
    if w.alpha2 > 0:
        dist = loss_dist(field, dist_points)
    else:
        with torch.no_grad():
            dist = loss_dist(field, dist_points)
    orth = loss_orth(field, None, batch.nearest_point, pr=pr, eps=options.eps, stats=stats)
    total = cd
    if w.alpha1 > 0:
        total = total + w.alpha1 * proj
    if w.alpha2 > 0:
        total = total + w.alpha2 * dist
    if w.alpha3 > 0:
        total = total + w.alpha3 * orth
    breakdown = LossBreakdown(
        cd=float(cd.detach()), proj=float(proj.detach()), dist=float(dist.detach()),
        orth=float(orth.detach()), total=float(total.detach()), skipped=stats,
    )
    return total, breakdown
