"""Reconstruction, normal and upsampling metrics.

Conventions:

* ``chamfer_l1``: mean of unsquared nearest-neighbour distances, averaged over
  both directions.
* ``chamfer_l2``: same with squared distances.  Reports multiply it by 1e4.
* F-score and normal consistency are reported on a 0-100 scale.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegenerateInputError, EmptyInputError, MissingDataError, ShapeError
from .geometry import PointCloud, TriangleMesh, as_points

CD_L2_REPORT_SCALE = 1e4


def _pts(x) -> np.ndarray:
    pts = x.points if isinstance(x, PointCloud) else as_points(x)
    if len(pts) == 0:
        raise EmptyInputError("empty point set")
    return pts


def _mean(x) -> float:
    # correctly rounded, so the value does not depend on summation order
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    return math.fsum(x.tolist()) / len(x)


def _dot3(u, v):
    return u[:, 0] * v[:, 0] + u[:, 1] * v[:, 1] + u[:, 2] * v[:, 2]


def _len3(u):
    return np.sqrt(_dot3(u, u))


def nn_distances(a, b):
    """For every point of ``a`` the distance to (and index of) its nearest point of ``b``.

    The KD-tree only proposes candidates; distances are recomputed as
    ``sqrt(dx*dx + dy*dy + dz*dz)`` and the smallest wins (lowest index on
    ties), so results are reproducible bit for bit.
    """
    a, b = _pts(a), _pts(b)
    k = min(4, len(b))
    tree = cKDTree(b)
    _, idx = tree.query(a, k=k)
    idx = np.asarray(idx).reshape(len(a), k)
    d = np.stack([_len3(a - b[idx[:, j]]) for j in range(k)], axis=1)
    dmin = d.min(axis=1)
    tied = d == dmin[:, None]
    best = np.where(tied, idx, len(b)).min(axis=1)
    # all k candidates tied: more may hide outside the candidate set
    for r in np.nonzero(tied[:, -1] & (k < len(b)))[0]:
        ball = np.asarray(tree.query_ball_point(a[r], dmin[r] * (1 + 1e-9) + 1e-300), dtype=np.int64)
        db = _len3(a[r] - b[ball])
        best[r] = ball[db == db.min()].min()
    return _len3(a - b[best]), best


def sample_mesh(mesh: TriangleMesh, count: int, seed: int = 0) -> PointCloud:
    """Area-weighted uniform samples, each carrying its face normal."""
    if mesh.is_empty:
        raise EmptyInputError("cannot sample an empty mesh")
    areas = mesh.areas()
    total = areas.sum()
    if not total > 0:
        raise DegenerateInputError("mesh has zero total area")
    rng = np.random.default_rng(seed)
    face = rng.choice(len(areas), size=count, p=areas / total)
    u = rng.random(count)
    v = rng.random(count)
    su = np.sqrt(u)
    w0, w1, w2 = 1 - su, su * (1 - v), su * v
    tri = mesh.triangles[face]
    verts = mesh.vertices
    pts = w0[:, None] * verts[tri[:, 0]] + w1[:, None] * verts[tri[:, 1]] + w2[:, None] * verts[tri[:, 2]]
    return PointCloud(pts, normals=mesh.face_normals()[face])


def chamfer_l1(pred, gt) -> float:
    d_pg, _ = nn_distances(pred, gt)
    d_gp, _ = nn_distances(gt, pred)
    return 0.5 * (_mean(d_pg) + _mean(d_gp))


def chamfer_l2(pred, gt) -> float:
    d_pg, _ = nn_distances(pred, gt)
    d_gp, _ = nn_distances(gt, pred)
    return 0.5 * (_mean(d_pg * d_pg) + _mean(d_gp * d_gp))


def fscore(pred, gt, tau: float) -> float:
    d_pg, _ = nn_distances(pred, gt)
    d_gp, _ = nn_distances(gt, pred)
    precision = int(np.count_nonzero(d_pg < tau)) / len(d_pg)
    recall = int(np.count_nonzero(d_gp < tau)) / len(d_gp)
    if precision + recall == 0:
        return 0.0
    return 100.0 * 2 * precision * recall / (precision + recall)


def _unit_rows(n):
    n = as_points(n)
    length = _len3(n)[:, None]
    return np.divide(n, length, out=np.zeros_like(n), where=length > 0)


def normal_consistency(pred: PointCloud, gt: PointCloud) -> float:
    """Mean absolute cosine between each normal and its nearest counterpart, both ways, x100."""
    if pred.normals is None or gt.normals is None:
        raise MissingDataError("normal consistency needs normals on both inputs")
    na, nb = _unit_rows(pred.normals), _unit_rows(gt.normals)
    _, i_ab = nn_distances(pred, gt)
    _, i_ba = nn_distances(gt, pred)
    c_ab = np.abs(_dot3(na, nb[i_ab]))
    c_ba = np.abs(_dot3(nb, na[i_ba]))
    return 100.0 * 0.5 * (_mean(c_ab) + _mean(c_ba))


def unoriented_angles(pred_normals, gt_normals) -> np.ndarray:
    """Per-point angle in degrees, folded into [0, 90]."""
    a, b = as_points(pred_normals), as_points(gt_normals)
    if a.shape != b.shape:
        raise ShapeError(f"normal counts differ: {len(a)} vs {len(b)}")
    cos = np.clip(np.abs(_dot3(_unit_rows(a), _unit_rows(b))), 0.0, 1.0)
    # libm acos rather than numpy's SIMD arccos: the two can differ in the last ulp
    return np.fromiter((math.degrees(math.acos(c)) for c in cos.tolist()), dtype=np.float64, count=len(cos))


def rmse_unoriented(pred_normals, gt_normals) -> float:
    ang = unoriented_angles(pred_normals, gt_normals)
    return math.sqrt(_mean(ang * ang))


def hausdorff(a, b) -> float:
    d_ab, _ = nn_distances(a, b)
    d_ba, _ = nn_distances(b, a)
    return float(max(d_ab.max(), d_ba.max()))


def closest_point_on_triangle(p, a, b, c) -> np.ndarray:
    """Exact closest points for row-aligned ``(K, 3)`` points and triangles (Voronoi-region test)."""
    ab, ac, ap = b - a, c - a, p - a
    d1 = _dot3(ab, ap)
    d2 = _dot3(ac, ap)
    bp = p - b
    d3 = _dot3(ab, bp)
    d4 = _dot3(ac, bp)
    cp = p - c
    d5 = _dot3(ab, cp)
    d6 = _dot3(ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2
    with np.errstate(divide="ignore", invalid="ignore"):
        t_ab = d1 / (d1 - d3)
        t_ac = d2 / (d2 - d6)
        t_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        denom = va + vb + vc
        v = vb / denom
        w = vc / denom
    conds = [
        (d1 <= 0) & (d2 <= 0),
        (d3 >= 0) & (d4 <= d3),
        (vc <= 0) & (d1 >= 0) & (d3 <= 0),
        (d6 >= 0) & (d5 <= d6),
        (vb <= 0) & (d2 >= 0) & (d6 <= 0),
        (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0),
    ]
    out = a + ab * v[:, None] + ac * w[:, None]
    choices = [a, b, a + ab * t_ab[:, None], c, a + ac * t_ac[:, None], b + (c - b) * t_bc[:, None]]
    for cond, val in zip(reversed(conds), reversed(choices)):
        out = np.where(cond[:, None], val, out)
    # degenerate (zero-area) triangles can still produce NaN; fall back to the nearest vertex
    bad = ~np.all(np.isfinite(out), axis=1)
    if bad.any():
        cand = np.stack([a[bad], b[bad], c[bad]], axis=1)
        k = np.argmin(np.stack([_len3(cand[:, j] - p[bad]) for j in range(3)], axis=1), axis=1)
        out[bad] = cand[np.arange(len(k)), k]
    return out


def point_triangle_distances(points, mesh: TriangleMesh) -> np.ndarray:
    """Exact distance from every point to the mesh surface.

    Candidates are pruned with a KD-tree over triangle centroids: any triangle
    closer than the current best ``u`` has its centroid within ``u + r_max``.
    """
    pts = _pts(points)
    if mesh.is_empty:
        raise EmptyInputError("empty mesh")
    tri = mesh.vertices[mesh.triangles]                      # (T, 3, 3)
    cen = tri.mean(axis=1)
    rmax = float(np.max(np.linalg.norm(tri - cen[:, None, :], axis=2)))
    tree = cKDTree(cen)
    _, first = tree.query(pts)
    cp = closest_point_on_triangle(pts, tri[first, 0], tri[first, 1], tri[first, 2])
    upper = _len3(pts - cp)
    lists = tree.query_ball_point(pts, upper + rmax + 1e-12)
    lens = np.array([len(x) for x in lists])
    owner = np.repeat(np.arange(len(pts)), lens)
    cand = np.concatenate([np.asarray(x, dtype=np.int64) for x in lists]) if len(owner) else np.zeros(0, np.int64)
    best = upper.copy()
    chunk = 1 << 20
    for s in range(0, len(cand), chunk):
        o, c = owner[s:s + chunk], cand[s:s + chunk]
        q = closest_point_on_triangle(pts[o], tri[c, 0], tri[c, 1], tri[c, 2])
        d = _len3(pts[o] - q)
        np.minimum.at(best, o, d)
    return best


def p2f(points, mesh: TriangleMesh) -> float:
    """Mean exact point-to-surface distance."""
    return _mean(point_triangle_distances(points, mesh))


@dataclass
class EvalReport:
    cd_l1: Optional[float] = None
    cd_l2: Optional[float] = None
    fscore_at: Dict[float, float] = field(default_factory=dict)
    normal_consistency: Optional[float] = None
    rmse_deg: Optional[float] = None
    p2f: Optional[float] = None
    hausdorff: Optional[float] = None

    def rows(self):
        out = []
        if self.cd_l1 is not None:
            out.append(("chamfer_l1", self.cd_l1))
        if self.cd_l2 is not None:
            out.append(("chamfer_l2_x1e4", self.cd_l2 * CD_L2_REPORT_SCALE))
        for tau, v in sorted(self.fscore_at.items()):
            out.append((f"fscore@{tau:g}", v))
        for name in ("normal_consistency", "rmse_deg", "p2f", "hausdorff"):
            v = getattr(self, name)
            if v is not None:
                out.append((name, v))
        return out

    def write_table(self, path, delimiter: str = "\t"):
        with open(path, "w") as fh:
            fh.write("# chamfer_l1: mean unsquared NN distance, both directions averaged\n")
            fh.write("# chamfer_l2_x1e4: mean squared NN distance, both directions averaged, times 1e4\n")
            fh.write("# fscore and normal_consistency on a 0-100 scale\n")
            fh.write(f"metric{delimiter}value\n")
            for name, v in self.rows():
                fh.write(f"{name}{delimiter}{v!r}\n")

    def write_json(self, path):
        d = asdict(self)
        d["fscore_at"] = {f"{k:g}": v for k, v in self.fscore_at.items()}
        with open(path, "w") as fh:
            json.dump(d, fh, indent=2, sort_keys=True)


def evaluate(pred, gt, thresholds: Sequence[float] = (0.005, 0.01), samples: int = 100_000,
             seed: int = 0, pred_normals=None) -> EvalReport:
    """Compare a predicted mesh or cloud with a ground-truth mesh or cloud.

    Meshes are sampled (``samples`` points, area weighted); normal consistency
    is computed when both sides carry normals, P2F when the ground truth is a mesh.
    """
    gt_mesh = gt if isinstance(gt, TriangleMesh) else None
    pc_pred = sample_mesh(pred, samples, seed) if isinstance(pred, TriangleMesh) else _cloud(pred)
    pc_gt = sample_mesh(gt, samples, seed + 1) if gt_mesh is not None else _cloud(gt)
    rep = EvalReport(
        cd_l1=chamfer_l1(pc_pred, pc_gt),
        cd_l2=chamfer_l2(pc_pred, pc_gt),
        fscore_at={float(t): fscore(pc_pred, pc_gt, t) for t in thresholds},
        hausdorff=hausdorff(pc_pred, pc_gt),
    )
    if pc_pred.normals is not None and pc_gt.normals is not None:
        rep.normal_consistency = normal_consistency(pc_pred, pc_gt)
    if gt_mesh is not None and not gt_mesh.is_empty:
        src = pred.points if isinstance(pred, PointCloud) else pc_pred.points
        rep.p2f = p2f(src, gt_mesh)
    return rep


def _cloud(x) -> PointCloud:
    return x if isinstance(x, PointCloud) else PointCloud(as_points(x))
