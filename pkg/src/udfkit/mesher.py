"""Open-surface extraction from an unsigned distance field.

A UDF has no sign, so marching cubes cannot run on it directly.  Inside each
cell near the surface, corner pairs are classified by the dot product of
their field gradients (positive: same side, negative: opposite sides) and the
pairwise relations are turned into per-corner pseudo-signs by voting.  The
usual case table then runs on those pseudo-signs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from ._mc_tables import CORNER_OFFSETS, EDGE_CORNERS, TRI_TABLE
from .field import evaluate, evaluate_with_gradient
from .geometry import TriangleMesh

SAME, OPPOSITE, AMBIGUOUS = "same", "opposite", "ambiguous"

_OFFSETS = np.asarray(CORNER_OFFSETS, dtype=np.int64)
_EDGES = np.asarray(EDGE_CORNERS, dtype=np.int64)
_TRI = np.full((256, 15), -1, dtype=np.int64)
for _case, _row in enumerate(TRI_TABLE):
    _TRI[_case, :len(_row)] = _row
_NTRI = np.array([len(r) // 3 for r in TRI_TABLE], dtype=np.int64)


def side_classifier(g_i, g_j, tau: float = 0.0) -> str:
    """Relative side of two points from their gradients."""
    d = float(np.dot(np.asarray(g_i, dtype=np.float64), np.asarray(g_j, dtype=np.float64)))
    if d > tau:
        return SAME
    if d < -tau:
        return OPPOSITE
    return AMBIGUOUS


@dataclass
class LatticeGrid:
    """Sampled distances on a regular grid plus gradients at the corners of active cells."""

    resolution: int
    lo: np.ndarray
    hi: np.ndarray
    distances: np.ndarray          # (R, R, R)
    active_cells: np.ndarray       # (C, 3) lower-corner indices
    corner_ids: np.ndarray         # (C, 8) flat corner indices
    grads: np.ndarray              # (C, 8, 3)

    @property
    def spacing(self) -> np.ndarray:
        return (self.hi - self.lo) / (self.resolution - 1)

    def corner_positions(self, flat_ids) -> np.ndarray:
        ijk = np.stack(np.unravel_index(flat_ids, (self.resolution,) * 3), axis=-1)
        return self.lo + ijk * self.spacing

    def flipped(self) -> "LatticeGrid":
        return LatticeGrid(self.resolution, self.lo, self.hi, self.distances,
                           self.active_cells, self.corner_ids, -self.grads)


def _bounds(bounds) -> Tuple[np.ndarray, np.ndarray]:
    lo, hi = bounds
    lo = np.broadcast_to(np.asarray(lo, dtype=np.float64), (3,)).copy()
    hi = np.broadcast_to(np.asarray(hi, dtype=np.float64), (3,)).copy()
    return lo, hi


def default_threshold(resolution: int, bounds=(-0.5, 0.5)) -> float:
    lo, hi = _bounds(bounds)
    return 2.0 * float(np.linalg.norm((hi - lo) / (resolution - 1)))


def build_lattice(field, resolution: int, activation_threshold: Optional[float] = None,
                  bounds=(-0.5, 0.5)) -> LatticeGrid:
    if resolution < 2:
        raise ValueError("resolution must be >= 2")
    lo, hi = _bounds(bounds)
    if activation_threshold is None:
        activation_threshold = default_threshold(resolution, bounds)
    axes = [np.linspace(lo[a], hi[a], resolution) for a in range(3)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    dist = evaluate(field, grid).reshape((resolution,) * 3)
    r1 = resolution - 1
    cmin = dist[:r1, :r1, :r1]
    for o in _OFFSETS[1:]:
        cmin = np.minimum(cmin, dist[o[0]:o[0] + r1, o[1]:o[1] + r1, o[2]:o[2] + r1])
    cells = np.argwhere(cmin < activation_threshold)
    corners = cells[:, None, :] + _OFFSETS[None, :, :]
    corner_ids = np.ravel_multi_index(tuple(corners.reshape(-1, 3).T), (resolution,) * 3)
    corner_ids = corner_ids.reshape(-1, 8)
    uniq, inv = np.unique(corner_ids, return_inverse=True)
    if len(uniq):
        _, g = evaluate_with_gradient(field, grid[uniq])
        grads = g[inv.reshape(-1)].reshape(-1, 8, 3)
    else:
        grads = np.zeros((0, 8, 3))
    return LatticeGrid(resolution, lo, hi, dist, cells, corner_ids, grads)


def pseudo_signs(grads: np.ndarray, tau: float = 0.0) -> np.ndarray:
    """Per-corner signs ``(C, 8)`` from gradient-direction votes.

    Corner 0 is positive.  Corner ``k`` takes the majority vote of its
    classifications against corners ``0..k-1``; ambiguous pairs abstain.  With
    no votes at all it copies corner 0; a tied vote is settled by the
    dot-product-weighted vote (and corner 0 if that is zero too).
    """
    c = grads.shape[0]
    signs = np.zeros((c, 8))
    signs[:, 0] = 1.0
    for k in range(1, 8):
        d = np.einsum("cd,cjd->cj", grads[:, k], grads[:, :k])
        cls = np.where(d > tau, 1.0, np.where(d < -tau, -1.0, 0.0))
        votes = cls * signs[:, :k]
        pos = (votes > 0).sum(axis=1)
        neg = (votes < 0).sum(axis=1)
        weighted = np.sign(np.sum(d * signs[:, :k], axis=1))
        tie = np.where((pos == 0) & (neg == 0), 1.0, np.where(weighted == 0, 1.0, weighted))
        signs[:, k] = np.where(pos > neg, 1.0, np.where(neg > pos, -1.0, tie))
    return signs


def mesh_from_lattice(lattice: LatticeGrid, tau: float = 0.0) -> TriangleMesh:
    if len(lattice.active_cells) == 0:
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), np.int64))
    signs = pseudo_signs(lattice.grads, tau)
    case = ((signs < 0).astype(np.int64) << np.arange(8)).sum(axis=1)
    ntri = _NTRI[case]
    cell_idx, slot_idx = [], []
    for t in range(5):
        sel = np.nonzero(ntri > t)[0]
        cell_idx.append(sel)
        slot_idx.append(np.full(len(sel), t))
    cell_idx = np.concatenate(cell_idx)
    slot_idx = np.concatenate(slot_idx)
    if len(cell_idx) == 0:
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), np.int64))
    # keep cell-major order so output is a deterministic traversal of the lattice
    order = np.lexsort((slot_idx, cell_idx))
    cell_idx, slot_idx = cell_idx[order], slot_idx[order]
    edges = np.stack([_TRI[case[cell_idx], 3 * slot_idx + j] for j in range(3)], axis=1)  # (T, 3)
    ca = lattice.corner_ids[cell_idx[:, None], _EDGES[edges, 0]]
    cb = lattice.corner_ids[cell_idx[:, None], _EDGES[edges, 1]]
    lo_id, hi_id = np.minimum(ca, cb), np.maximum(ca, cb)
    n_total = lattice.resolution ** 3
    keys = lo_id * n_total + hi_id
    uniq, inv = np.unique(keys.reshape(-1), return_inverse=True)
    a, b = uniq // n_total, uniq % n_total
    flat_d = lattice.distances.reshape(-1)
    da, db = flat_d[a], flat_d[b]
    xa, xb = lattice.corner_positions(a), lattice.corner_positions(b)
    s = da + db
    degenerate = s < 1e-12
    t = np.where(degenerate, 0.5, da / np.where(degenerate, 1.0, s))
    verts = xa + t[:, None] * (xb - xa)
    tris = inv.reshape(-1, 3)
    return TriangleMesh(verts, tris)


def extract_mesh(field, resolution: int = 128, activation_threshold: Optional[float] = None,
                 bounds=(-0.5, 0.5), tau: float = 0.0) -> TriangleMesh:
    """Triangle mesh of the zero level set; open boundaries are allowed.

    Only cells whose smallest corner distance is below
    ``activation_threshold`` (default: two cell diagonals) are triangulated.
    An empty mesh is returned when no cell qualifies.
    """
    lattice = build_lattice(field, resolution, activation_threshold, bounds)
    return mesh_from_lattice(lattice, tau)
