"""Point clouds, triangle meshes, file I/O and nearest-neighbour queries.

Points are plain ``(N, 3)`` float64 arrays; a single point is a ``(3,)`` array.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .errors import DegenerateInputError, EmptyInputError, ParseError, ShapeError

# relative slack used when deciding whether two candidate distances tie
_TIE_RTOL = 1e-12


def _as_points(points) -> np.ndarray:
    arr = np.asarray(points, dtype=np.float64)
    if arr.ndim == 1 and arr.shape[0] == 3:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ShapeError(f"expected an (N, 3) array of points, got shape {arr.shape}")
    return arr


def _row_dist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = a - b
    return np.sqrt(np.sum(d * d, axis=-1))


@dataclass(frozen=True, eq=False)
class PointCloud:
    """An immutable point set with a KD-tree index.

    ``center`` and ``scale`` record the normalization that was applied, so that
    ``original = points * scale + center``.
    """

    points: np.ndarray
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))
    scale: float = 1.0
    normals: Optional[np.ndarray] = None

    def __post_init__(self):
        pts = _as_points(self.points).copy()
        if len(pts) == 0:
            raise EmptyInputError("point cloud has no points")
        if not np.all(np.isfinite(pts)):
            raise DegenerateInputError("point cloud contains non-finite coordinates")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        center = np.asarray(self.center, dtype=np.float64).reshape(3).copy()
        center.setflags(write=False)
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "scale", float(self.scale))
        if self.normals is not None:
            nrm = _as_points(self.normals).copy()
            if len(nrm) != len(pts):
                raise ShapeError("normals must match the number of points")
            nrm.setflags(write=False)
            object.__setattr__(self, "normals", nrm)
        object.__setattr__(self, "_tree", None)

    def __len__(self) -> int:
        return len(self.points)

    @property
    def tree(self) -> cKDTree:
        if self._tree is None:
            object.__setattr__(self, "_tree", cKDTree(self.points))
        return self._tree

    def denormalize(self, pts) -> np.ndarray:
        return _as_points(pts) * self.scale + self.center

    def to_normalized(self, pts) -> np.ndarray:
        return (_as_points(pts) - self.center) / self.scale

    def is_normalized(self, atol: float = 1e-9) -> bool:
        return bool(np.all(np.abs(self.points) <= 0.5 + atol))


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        t = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(t):
            if t.min() < 0 or t.max() >= len(v):
                raise ShapeError("triangle index out of range")
            if np.any((t[:, 0] == t[:, 1]) | (t[:, 1] == t[:, 2]) | (t[:, 0] == t[:, 2])):
                raise ShapeError("degenerate triangle (repeated vertex index)")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)

    @property
    def is_empty(self) -> bool:
        return len(self.triangles) == 0

    def face_normals(self) -> np.ndarray:
        a, b, c = (self.vertices[self.triangles[:, k]] for k in range(3))
        n = np.cross(b - a, c - a)
        length = np.linalg.norm(n, axis=1, keepdims=True)
        return np.divide(n, length, out=np.zeros_like(n), where=length > 0)

    def areas(self) -> np.ndarray:
        a, b, c = (self.vertices[self.triangles[:, k]] for k in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def edge_counts(self):
        """Unique undirected edges ``(E, 2)`` and how many triangles use each."""
        t = self.triangles
        e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        e.sort(axis=1)
        return np.unique(e, axis=0, return_counts=True)

    def boundary_edges(self) -> np.ndarray:
        if self.is_empty:
            return np.zeros((0, 2), dtype=np.int64)
        edges, counts = self.edge_counts()
        return edges[counts == 1]

    def connected_components(self) -> int:
        """Number of face-connected pieces (vertices not referenced by any face are ignored)."""
        if self.is_empty:
            return 0
        t = self.triangles
        used = np.unique(t)
        rows = np.concatenate([t[:, 0], t[:, 1], t[:, 2]])
        cols = np.concatenate([t[:, 1], t[:, 2], t[:, 0]])
        n = len(self.vertices)
        adj = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
        _, labels = connected_components(adj, directed=False)
        return len(np.unique(labels[used]))


# ---------------------------------------------------------------------------
# Reading and writing
# ---------------------------------------------------------------------------

def load_point_cloud(path, format: Optional[str] = None) -> PointCloud:
    """Read an XYZ or PLY file; the returned cloud is not normalized."""
    path = os.fspath(path)
    fmt = (format or os.path.splitext(path)[1].lstrip(".")).lower()
    if fmt == "xyz":
        pts = _read_xyz(path)
    elif fmt == "ply":
        pts, _ = _read_ply(path)
    else:
        raise ValueError(f"unsupported point cloud format: {fmt!r}")
    if len(pts) == 0:
        raise EmptyInputError(f"{path}: no points")
    return PointCloud(pts)


def _read_xyz(path) -> np.ndarray:
    rows = []
    with open(path, "r") as fh:
        for lineno, line in enumerate(fh, start=1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            tokens = s.split()
            if len(tokens) < 3:
                raise ParseError(path, lineno, f"expected 3 coordinates, got {len(tokens)}")
            try:
                rows.append([float(tok) for tok in tokens[:3]])
            except ValueError:
                raise ParseError(path, lineno, f"non-numeric coordinate in {s!r}") from None
    return np.asarray(rows, dtype=np.float64).reshape(-1, 3)


_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def _read_ply(path):
    """Return ``(vertices, faces_or_None)`` from an ASCII or little-endian binary PLY."""
    with open(path, "rb") as fh:
        data = fh.read()
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise ParseError(path, 1, "missing ply header")
    body_start = data.index(b"\n", end) + 1
    header = data[:body_start].decode("ascii", errors="replace").splitlines()
    fmt = None
    elements = []  # [name, count, [(prop, type) or (prop, ("list", ctype, itype))]]
    for lineno, line in enumerate(header, start=1):
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            try:
                elements.append([tok[1], int(tok[2]), []])
            except (IndexError, ValueError):
                raise ParseError(path, lineno, "bad element line") from None
        elif tok[0] == "property":
            if not elements:
                raise ParseError(path, lineno, "property before element")
            if tok[1] == "list":
                elements[-1][2].append((tok[4], ("list", tok[2], tok[3])))
            else:
                elements[-1][2].append((tok[2], tok[1]))
    if fmt not in ("ascii", "binary_little_endian"):
        raise ParseError(path, 2, f"unsupported ply format {fmt!r}")

    vertices = None
    faces = None
    if fmt == "ascii":
        lines = data[body_start:].decode("ascii", errors="replace").splitlines()
        cursor = 0
        base = len(header)
        for name, count, props in elements:
            block = []
            for k in range(count):
                if cursor >= len(lines):
                    raise ParseError(path, base + cursor + 1, f"truncated {name} element")
                try:
                    block.append([float(x) for x in lines[cursor].split()])
                except ValueError:
                    raise ParseError(path, base + cursor + 1, "non-numeric value") from None
                cursor += 1
            if name == "vertex":
                names = [p for p, _ in props]
                try:
                    cols = [names.index(c) for c in "xyz"]
                except ValueError:
                    raise ParseError(path, 1, "vertex element lacks x/y/z") from None
                try:
                    vertices = np.array([[row[c] for c in cols] for row in block], dtype=np.float64)
                except IndexError:
                    raise ParseError(path, base + 1, "short vertex record") from None
                vertices = vertices.reshape(-1, 3)
            elif name == "face":
                faces = _triangulate([[int(v) for v in row[1:1 + int(row[0])]] for row in block])
        return vertices if vertices is not None else np.zeros((0, 3)), faces

    offset = body_start
    for name, count, props in elements:
        if any(isinstance(t, tuple) for _, t in props):
            if name != "face":
                raise ParseError(path, 1, f"list properties unsupported on element {name!r}")
            polys = []
            for k in range(count):
                for pname, t in props:
                    ctype, itype = _PLY_TYPES[t[1]], _PLY_TYPES[t[2]]
                    csize = np.dtype(ctype).itemsize
                    if offset + csize > len(data):
                        raise ParseError(path, 1, "truncated face block")
                    n = int(np.frombuffer(data, "<" + ctype, 1, offset)[0])
                    offset += csize
                    isize = np.dtype(itype).itemsize
                    if offset + n * isize > len(data):
                        raise ParseError(path, 1, "truncated face block")
                    idx = np.frombuffer(data, "<" + itype, n, offset)
                    offset += n * isize
                    if pname in ("vertex_indices", "vertex_index"):
                        polys.append([int(v) for v in idx])
            faces = _triangulate(polys)
            continue
        dtype = np.dtype([(p, "<" + _PLY_TYPES[t]) for p, t in props])
        nbytes = dtype.itemsize * count
        if offset + nbytes > len(data):
            raise ParseError(path, 1, f"truncated {name} element")
        arr = np.frombuffer(data, dtype, count, offset)
        offset += nbytes
        if name == "vertex":
            if not all(c in dtype.names for c in "xyz"):
                raise ParseError(path, 1, "vertex element lacks x/y/z")
            vertices = np.stack([arr[c].astype(np.float64) for c in "xyz"], axis=1)
    return vertices if vertices is not None else np.zeros((0, 3)), faces


def _triangulate(polys):
    tris = []
    for poly in polys:
        for k in range(1, len(poly) - 1):
            tris.append([poly[0], poly[k], poly[k + 1]])
    return np.asarray(tris, dtype=np.int64).reshape(-1, 3)


def save_xyz(path, points, normals=None):
    pts = _as_points(points)
    cols = pts if normals is None else np.hstack([pts, _as_points(normals)])
    np.savetxt(path, cols, fmt="%.17g")


def save_ply(path, points, normals=None, binary=True):
    pts = _as_points(points)
    props = ["x", "y", "z"] + (["nx", "ny", "nz"] if normals is not None else [])
    cols = pts if normals is None else np.hstack([pts, _as_points(normals)])
    head = ["ply", "format " + ("binary_little_endian" if binary else "ascii") + " 1.0",
            f"element vertex {len(pts)}"]
    head += [f"property double {p}" for p in props]
    head.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(head) + "\n").encode("ascii"))
        if binary:
            fh.write(np.ascontiguousarray(cols, dtype="<f8").tobytes())
        else:
            np.savetxt(fh, cols, fmt="%.17g")


def save_mesh(path, mesh: TriangleMesh):
    """Write OBJ or ASCII PLY depending on the extension."""
    path = os.fspath(path)
    ext = os.path.splitext(path)[1].lower()
    if ext == ".obj":
        with open(path, "w") as fh:
            for v in mesh.vertices:
                fh.write(f"v {v[0]:.17g} {v[1]:.17g} {v[2]:.17g}\n")
            for t in mesh.triangles + 1:
                fh.write(f"f {t[0]} {t[1]} {t[2]}\n")
    elif ext == ".ply":
        with open(path, "w") as fh:
            fh.write("ply\nformat ascii 1.0\n")
            fh.write(f"element vertex {len(mesh.vertices)}\n")
            fh.write("property double x\nproperty double y\nproperty double z\n")
            fh.write(f"element face {len(mesh.triangles)}\n")
            fh.write("property list uchar int vertex_indices\nend_header\n")
            for v in mesh.vertices:
                fh.write(f"{v[0]:.17g} {v[1]:.17g} {v[2]:.17g}\n")
            for t in mesh.triangles:
                fh.write(f"3 {t[0]} {t[1]} {t[2]}\n")
    else:
        raise ValueError(f"unsupported mesh format: {ext!r}")


def load_mesh(path) -> TriangleMesh:
    path = os.fspath(path)
    ext = os.path.splitext(path)[1].lower()
    if ext == ".ply":
        verts, faces = _read_ply(path)
        return TriangleMesh(verts, faces if faces is not None else np.zeros((0, 3), np.int64))
    if ext != ".obj":
        raise ValueError(f"unsupported mesh format: {ext!r}")
    verts, polys = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            tok = line.split()
            if not tok:
                continue
            try:
                if tok[0] == "v":
                    verts.append([float(x) for x in tok[1:4]])
                elif tok[0] == "f":
                    polys.append([int(x.split("/")[0]) - 1 for x in tok[1:]])
            except ValueError:
                raise ParseError(path, lineno, f"bad record {line.strip()!r}") from None
    return TriangleMesh(np.asarray(verts).reshape(-1, 3), _triangulate(polys))


# ---------------------------------------------------------------------------
# Normalization and queries
# ---------------------------------------------------------------------------

def normalize(cloud: PointCloud) -> PointCloud:
    """Center on the bounding-box midpoint and scale the longest box edge to 1.

    The recorded transform composes with whatever normalization ``cloud``
    already carried, so ``denormalize`` always maps back to file coordinates.
    """
    pts = cloud.points
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    extent = float(np.max(hi - lo))
    if extent == 0.0:
        raise DegenerateInputError("all points are identical; cannot normalize")
    center = 0.5 * (lo + hi)
    out = np.clip((pts - center) / extent, -0.5, 0.5)
    normals = cloud.normals
    return PointCloud(out, center=cloud.center + cloud.scale * center,
                      scale=cloud.scale * extent, normals=normals)


def nearest_many(cloud: PointCloud, queries):
    """Vectorised :func:`nearest`: returns ``(points, indices, distances)``.

    Ties are broken toward the lowest point index.
    """
    q = _as_points(queries)
    pts = cloud.points
    n = len(pts)
    k = min(4, n)
    _, idx = cloud.tree.query(q, k=k)
    idx = np.asarray(idx).reshape(len(q), k)
    d = _row_dist(pts[idx], q[:, None, :])
    dmin = d.min(axis=1)
    tied = d <= dmin[:, None] * (1 + _TIE_RTOL)
    cand = np.where(tied, idx, n)
    best = cand.min(axis=1)
    # the k-th candidate tying means more ties may exist outside the k returned
    overflow = np.nonzero(tied[:, -1] & (k < n))[0]
    for r in overflow:
        ball = cloud.tree.query_ball_point(q[r], dmin[r] * (1 + 1e-9) + 1e-300)
        ball = np.asarray(ball, dtype=np.int64)
        db = _row_dist(pts[ball], q[r])
        m = db.min()
        best[r] = ball[db <= m * (1 + _TIE_RTOL)].min()
        dmin[r] = m
    dist = _row_dist(pts[best], q)
    return pts[best], best, dist


def nearest(cloud: PointCloud, q):
    """Closest cloud point to ``q``: ``(point, index, distance)``."""
    p, i, d = nearest_many(cloud, np.asarray(q, dtype=np.float64).reshape(1, 3))
    return p[0], int(i[0]), float(d[0])


def _min_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """For each row of ``a`` the distance to the closest row of ``b``."""
    d, _ = cKDTree(b).query(a)
    return np.asarray(d)


def chamfer_l2(a, b, squared: bool = False) -> float:
    """Two-sided Chamfer distance with unsquared Euclidean terms (sum of both means).

    ``squared=True`` uses squared distances instead.
    """
    a = _as_points(a)
    b = _as_points(b)
    if len(a) == 0 or len(b) == 0:
        raise EmptyInputError("chamfer distance of an empty point set")
    dab = _min_dists(a, b)
    dba = _min_dists(b, a)
    if squared:
        dab, dba = dab ** 2, dba ** 2
    return float(dab.mean() + dba.mean())


def pairwise_min(a, b):
    """Distances and indices from each ``a`` to its nearest ``b`` (KD-tree backed)."""
    d, i = cKDTree(_as_points(b)).query(_as_points(a))
    return np.asarray(d), np.asarray(i)


def as_points(points) -> np.ndarray:
    return _as_points(points)


__all__: Sequence[str] = [
    "PointCloud", "TriangleMesh", "load_point_cloud", "load_mesh", "save_xyz", "save_ply",
    "save_mesh", "normalize", "nearest", "nearest_many", "chamfer_l2", "pairwise_min", "as_points",
]
