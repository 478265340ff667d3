"""Geometric types and mesh utilities shared by every stage of the pipeline.

Meshes and clouds are thin wrappers around float64/int64 numpy arrays that are
frozen (``writeable=False``) after construction.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

# Shapes live in [-0.5, 0.5]^3; the extra 0.05 is padding for extraction.
WORLD_HALF_EXTENT = 0.55


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Aabb:
    min: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        lo = _frozen(self.min, np.float64).reshape(3)
        hi = _frozen(self.max, np.float64).reshape(3)
        if np.any(lo > hi):
            raise ValueError(f"Aabb min {lo} exceeds max {hi}")
        object.__setattr__(self, "min", lo)
        object.__setattr__(self, "max", hi)

    @classmethod
    def cube(cls, half_extent=WORLD_HALF_EXTENT):
        return cls(np.full(3, -half_extent), np.full(3, half_extent))

    @property
    def size(self):
        return self.max - self.min

    @property
    def volume(self):
        return float(np.prod(self.size))

    def contains(self, points):
        points = np.asarray(points, dtype=np.float64)
        return np.all((points >= self.min) & (points <= self.max), axis=-1)


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    """Indexed triangle mesh with optional per-vertex normals."""

    vertices: np.ndarray
    triangles: np.ndarray
    normals: np.ndarray | None = None

    def __post_init__(self):
        v = _frozen(self.vertices, np.float64).reshape(-1, 3)
        t = _frozen(self.triangles, np.int64).reshape(-1, 3)
        if not np.all(np.isfinite(v)):
            raise ValueError("mesh vertices must be finite")
        if t.size and (t.min() < 0 or t.max() >= len(v)):
            raise ValueError(
                f"triangle index out of range for {len(v)} vertices "
                f"(found {t.min()}..{t.max()})"
            )
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)
        if self.normals is not None:
            n = _frozen(self.normals, np.float64).reshape(-1, 3)
            if n.shape != v.shape:
                raise ValueError(f"normals shape {n.shape} != vertices shape {v.shape}")
            object.__setattr__(self, "normals", n)

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_triangles(self):
        return len(self.triangles)

    @property
    def is_empty(self):
        return self.n_triangles == 0

    def corners(self):
        """(T, 3, 3) array of triangle corner positions."""
        return self.vertices[self.triangles]

    def bounds(self):
        if self.n_vertices == 0:
            raise ValueError("empty mesh has no bounds")
        return Aabb(self.vertices.min(axis=0), self.vertices.max(axis=0))

    def flipped(self):
        n = None if self.normals is None else -self.normals
        return TriangleMesh(self.vertices, self.triangles[:, ::-1], n)

    def transformed(self, matrix=None, offset=None):
        """Apply ``x -> x @ matrix.T + offset`` to the vertices; drops normals."""
        v = self.vertices
        if matrix is not None:
            v = v @ np.asarray(matrix, dtype=np.float64).T
        if offset is not None:
            v = v + np.asarray(offset, dtype=np.float64)
        return TriangleMesh(v, self.triangles)

    def degenerate_mask(self, tol=0.0):
        return triangle_areas(self) <= tol

    def without_degenerate(self):
        keep = ~self.degenerate_mask()
        return TriangleMesh(self.vertices, self.triangles[keep], self.normals)


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray
    normals: np.ndarray | None = None

    def __post_init__(self):
        p = _frozen(self.points, np.float64).reshape(-1, 3)
        if len(p) == 0:
            raise ValueError("point cloud must be nonempty")
        if not np.all(np.isfinite(p)):
            raise ValueError("point cloud coordinates must be finite")
        object.__setattr__(self, "points", p)
        if self.normals is not None:
            n = _frozen(self.normals, np.float64).reshape(-1, 3)
            if n.shape != p.shape:
                raise ValueError(f"normals shape {n.shape} != points shape {p.shape}")
            object.__setattr__(self, "normals", n)

    def __len__(self):
        return len(self.points)

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        n = None if self.normals is None else self.normals[idx]
        return PointCloud(self.points[idx], n)


# ---------------------------------------------------------------------------
# per-face quantities
# ---------------------------------------------------------------------------

def _face_cross(mesh):
    c = mesh.corners()
    return np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0])


def triangle_areas(mesh):
    return 0.5 * np.linalg.norm(_face_cross(mesh), axis=1)


def face_normals(mesh):
    """Unit face normals; zero-area faces get a zero vector."""
    cr = _face_cross(mesh)
    norm = np.linalg.norm(cr, axis=1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        n = np.where(norm > 0, cr / norm, 0.0)
    return n


def compute_vertex_normals(mesh):
    """Area-weighted vertex normals.

    Vertices without an incident face (or whose incident normals cancel) get
    +z, and a ``UserWarning`` reports how many there were.
    """
    cr = _face_cross(mesh)  # |cr| = 2 * area, so summing cr is area weighting
    acc = np.zeros_like(mesh.vertices)
    for k in range(3):
        np.add.at(acc, mesh.triangles[:, k], cr)
    norm = np.linalg.norm(acc, axis=1)
    bad = norm == 0
    normals = np.empty_like(acc)
    normals[~bad] = acc[~bad] / norm[~bad, None]
    normals[bad] = (0.0, 0.0, 1.0)
    if bad.any():
        warnings.warn(f"{int(bad.sum())} vertices had no usable incident triangle; "
                      "normal set to +z", stacklevel=2)
    return TriangleMesh(mesh.vertices, mesh.triangles, normals)


def mesh_volume(mesh):
    """Signed volume by summing origin-apex tetrahedra (positive if outward)."""
    if mesh.is_empty:
        return 0.0
    c = mesh.corners()
    return float(np.einsum("ij,ij->i", c[:, 0], np.cross(c[:, 1], c[:, 2])).sum() / 6.0)


def sample_surface(mesh, n, seed, return_faces=False):
    """Draw ``n`` area-weighted uniform samples on the surface.

    Returned normals are the unit normals of the owning faces.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if mesh.is_empty:
        raise ValueError("cannot sample a mesh with no triangles")
    areas = triangle_areas(mesh)
    total = areas.sum()
    if not total > 0:
        raise ValueError("cannot sample a mesh with zero total area")
    rng = np.random.default_rng(seed)
    cdf = np.cumsum(areas)
    faces = np.searchsorted(cdf, rng.random(n) * cdf[-1], side="right")
    faces = np.minimum(faces, len(areas) - 1)
    # a zero-area face can only be hit at a cdf plateau edge; skip to the next real face
    faces = np.searchsorted(cdf, cdf[faces], side="left")
    u, v = rng.random(n), rng.random(n)
    flip = u + v > 1.0
    u[flip], v[flip] = 1.0 - u[flip], 1.0 - v[flip]
    c = mesh.corners()[faces]
    pts = c[:, 0] + u[:, None] * (c[:, 1] - c[:, 0]) + v[:, None] * (c[:, 2] - c[:, 0])
    cloud = PointCloud(pts, face_normals(mesh)[faces])
    if return_faces:
        return cloud, faces
    return cloud


# ---------------------------------------------------------------------------
# topology
# ---------------------------------------------------------------------------

def edge_counts(mesh):
    """Return (unique undirected edges (E,2), number of incident triangles per edge)."""
    t = mesh.triangles
    e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
    e.sort(axis=1)
    return np.unique(e, axis=0, return_counts=True)


def open_edge_count(mesh):
    """Number of edges not shared by exactly two triangles."""
    if mesh.is_empty:
        return 0
    _, counts = edge_counts(mesh)
    return int(np.count_nonzero(counts != 2))


def is_watertight(mesh):
    return not mesh.is_empty and open_edge_count(mesh) == 0


def euler_characteristic(mesh):
    if mesh.is_empty:
        return 0
    edges, _ = edge_counts(mesh)
    used = np.unique(mesh.triangles)
    return len(used) - len(edges) + mesh.n_triangles


# ---------------------------------------------------------------------------
# nearest-neighbour search
# ---------------------------------------------------------------------------

class SpatialIndex:
    """Balanced k-d tree over a fixed point set.

    Queries return the Euclidean nearest point; among equidistant points the
    one inserted first wins.
    """

    def __init__(self, points):
        pts = _frozen(points, np.float64).reshape(-1, 3)
        if len(pts) == 0:
            raise ValueError("SpatialIndex needs at least one point")
        self.points = pts
        self._tree = cKDTree(pts, balanced_tree=True, compact_nodes=True)

    def __len__(self):
        return len(self.points)

    def query(self, queries):
        """Nearest indices and distances for an (M,3) query array."""
        q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        k = min(2, len(self.points))
        dist, idx = self._tree.query(q, k=k)
        if k == 1:
            return idx.astype(np.int64), dist
        # exact distances, recomputed so ties compare bit-for-bit
        d0 = np.linalg.norm(self.points[idx[:, 0]] - q, axis=1)
        d1 = np.linalg.norm(self.points[idx[:, 1]] - q, axis=1)
        best = idx[:, 0].astype(np.int64)
        swap = (d1 < d0) | ((d1 == d0) & (idx[:, 1] < idx[:, 0]))
        best[swap] = idx[swap, 1]
        best_d = np.where(swap, d1, d0)
        tied = np.nonzero(np.abs(d1 - d0) <= 1e-12 * np.maximum(d0, 1e-300))[0]
        for i in tied:
            cand = np.asarray(self._tree.query_ball_point(q[i], r=best_d[i] * (1 + 1e-9) + 1e-300))
            dc = np.linalg.norm(self.points[cand] - q[i], axis=1)
            m = dc.min()
            j = cand[dc == m].min()
            best[i], best_d[i] = j, m
        return best, best_d


def nearest_neighbor(index, q):
    """Nearest indexed point to ``q`` and its distance."""
    i, d = index.query(np.asarray(q, dtype=np.float64).reshape(1, 3))
    return index.points[i[0]].copy(), float(d[0])


# ---------------------------------------------------------------------------
# simple primitives (used by tests and demos)
# ---------------------------------------------------------------------------

def box_mesh(lo=(0.0, 0.0, 0.0), hi=(1.0, 1.0, 1.0)):
    """Closed, outward-oriented 12-triangle box."""
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    v = np.array([[x, y, z] for z in (0, 1) for y in (0, 1) for x in (0, 1)], dtype=float)
    v = lo + v * (hi - lo)
    t = np.array([
        [0, 2, 1], [1, 2, 3],  # z = lo
        [4, 5, 6], [5, 7, 6],  # z = hi
        [0, 1, 4], [1, 5, 4],  # y = lo
        [2, 6, 3], [3, 6, 7],  # y = hi
        [0, 4, 2], [2, 4, 6],  # x = lo
        [1, 3, 5], [3, 7, 5],  # x = hi
    ])
    return TriangleMesh(v, t)


def icosphere(radius=1.0, subdivisions=3, center=(0.0, 0.0, 0.0)):
    """Outward-oriented geodesic sphere."""
    p = (1 + 5 ** 0.5) / 2
    v = [[-1, p, 0], [1, p, 0], [-1, -p, 0], [1, -p, 0],
         [0, -1, p], [0, 1, p], [0, -1, -p], [0, 1, -p],
         [p, 0, -1], [p, 0, 1], [-p, 0, -1], [-p, 0, 1]]
    f = [[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
         [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
         [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
         [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]]
    verts = [np.asarray(x, float) / np.linalg.norm(x) for x in v]
    faces = f
    for _ in range(subdivisions):
        cache = {}

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        faces = new
    return TriangleMesh(np.asarray(verts) * radius + np.asarray(center, float), faces)
