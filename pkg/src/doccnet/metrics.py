"""Volumetric IoU, Chamfer distance and normal consistency between shapes."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .extraction import OccupancyField
from .geometry import Aabb, SpatialIndex, TriangleMesh, open_edge_count, sample_surface


class NotWatertightError(ValueError):
    def __init__(self, open_edges):
        super().__init__(f"mesh is not watertight: {open_edges} open edges")
        self.open_edges = open_edges


class EmptyMeshError(ValueError):
    pass


@dataclass
class MetricsReport:
    iou: float
    chamfer_l1: float
    normal_consistency: float
    n_samples: int
    n_points: int
    seed: int

    def to_dict(self):
        return asdict(self)


# ---------------------------------------------------------------------------
# inside / outside
# ---------------------------------------------------------------------------

def mesh_contains(mesh, points, seed=0, jitter=1e-7):
    """Inside test by the parity of +x ray crossings.

    Ray origins are shifted by a tiny random yz offset so rays do not graze
    edges or vertices. The mesh must be watertight.
    """
    open_edges = open_edge_count(mesh)
    if mesh.is_empty:
        return np.zeros(len(points), bool)
    if open_edges:
        raise NotWatertightError(open_edges)
    q = np.array(points, dtype=np.float64).reshape(-1, 3)
    rng = np.random.default_rng(seed)
    q[:, 1:] += rng.uniform(-jitter, jitter, size=(len(q), 2))

    tri = mesh.corners()
    yz_lo = tri[:, :, 1:].min(axis=1)
    yz_hi = tri[:, :, 1:].max(axis=1)
    lo = np.minimum(yz_lo.min(axis=0), q[:, 1:].min(axis=0))
    hi = np.maximum(yz_hi.max(axis=0), q[:, 1:].max(axis=0))
    G = int(np.clip(np.sqrt(len(tri)) / 2, 1, 128))
    cell = (hi - lo) / G
    cell[cell == 0] = 1.0

    def to_cell(v):
        return np.clip(((v - lo) / cell).astype(np.int64), 0, G - 1)

    c_lo, c_hi = to_cell(yz_lo), to_cell(yz_hi)
    # bucket triangles into every grid cell their yz box touches
    spans = (c_hi - c_lo + 1)
    counts = spans[:, 0] * spans[:, 1]
    tid = np.repeat(np.arange(len(tri)), counts)
    k = np.arange(len(tid)) - np.repeat(np.cumsum(counts) - counts, counts)
    cy = c_lo[tid, 0] + k // spans[tid, 1]
    cz = c_lo[tid, 1] + k % spans[tid, 1]
    bucket = cy * G + cz
    order = np.argsort(bucket, kind="stable")
    bucket, tid = bucket[order], tid[order]
    starts = np.searchsorted(bucket, np.arange(G * G), side="left")
    ends = np.searchsorted(bucket, np.arange(G * G), side="right")

    qc = to_cell(q[:, 1:])
    qcell = qc[:, 0] * G + qc[:, 1]
    crossings = np.zeros(len(q), dtype=np.int64)
    for c in np.unique(qcell):
        ts = tid[starts[c]:ends[c]]
        if len(ts) == 0:
            continue
        qi = np.nonzero(qcell == c)[0]
        a, b, cc = tri[ts, 0], tri[ts, 1], tri[ts, 2]
        py, pz = q[qi, 1][:, None], q[qi, 2][:, None]

        def edge(u, v):
            return (v[None, :, 1] - u[None, :, 1]) * (pz - u[None, :, 2]) - \
                   (v[None, :, 2] - u[None, :, 2]) * (py - u[None, :, 1])

        d0, d1, d2 = edge(a, b), edge(b, cc), edge(cc, a)
        tot = d0 + d1 + d2
        hit = (((d0 >= 0) & (d1 >= 0) & (d2 >= 0)) | ((d0 <= 0) & (d1 <= 0) & (d2 <= 0))) & (tot != 0)
        with np.errstate(invalid="ignore", divide="ignore"):
            x = (d1 * a[None, :, 0] + d2 * b[None, :, 0] + d0 * cc[None, :, 0]) / tot
        hit &= x > q[qi, 0][:, None]
        crossings[qi] = hit.sum(axis=1)
    return crossings % 2 == 1


def _indicator(shape, points, seed):
    if isinstance(shape, TriangleMesh):
        return mesh_contains(shape, points, seed)
    if isinstance(shape, OccupancyField) or callable(shape):
        return np.asarray(shape(points)) > 0.5
    raise TypeError(f"cannot test inside/outside for {type(shape).__name__}")


def _shape_bounds(shape):
    if isinstance(shape, TriangleMesh):
        return None if shape.is_empty else shape.bounds()
    return getattr(shape, "bounds", None)


def volumetric_iou(pred, gt, n_samples=100_000, seed=0, bounds=None):
    """Monte-Carlo |A and B| / |A or B| over uniform points in a shared box.

    ``pred`` and ``gt`` may be occupancy fields (inside where p > 0.5) or
    watertight meshes. The box defaults to the union of the operands' bounds.
    Two empty shapes have IoU 1.
    """
    if n_samples < 10_000:
        raise ValueError(f"n_samples must be >= 1e4, got {n_samples}")
    for s in (pred, gt):
        if isinstance(s, TriangleMesh) and not s.is_empty:
            oe = open_edge_count(s)
            if oe:
                raise NotWatertightError(oe)
    if bounds is None:
        bs = [b for b in (_shape_bounds(pred), _shape_bounds(gt)) if b is not None]
        if not bs:
            return 1.0
        bounds = Aabb(np.min([b.min for b in bs], axis=0), np.max([b.max for b in bs], axis=0))
    rng = np.random.default_rng(seed)
    pts = bounds.min + rng.random((n_samples, 3)) * bounds.size
    a = _indicator(pred, pts, seed)
    b = _indicator(gt, pts, seed)
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


# ---------------------------------------------------------------------------
# surface metrics
# ---------------------------------------------------------------------------

def _seed_pair(seed):
    if isinstance(seed, (tuple, list)):
        return int(seed[0]), int(seed[1])
    return int(seed), int(seed)


def _check_nonempty(*meshes):
    for m in meshes:
        if m.is_empty:
            raise EmptyMeshError("cannot evaluate a surface metric on an empty mesh")


def chamfer_distance(points_a, points_b):
    """Mean of the two directed mean nearest-neighbour Euclidean distances."""
    pa = np.asarray(points_a, dtype=np.float64).reshape(-1, 3)
    pb = np.asarray(points_b, dtype=np.float64).reshape(-1, 3)
    if len(pa) == 0 or len(pb) == 0:
        raise EmptyMeshError("cannot compute Chamfer distance of an empty point set")
    _, d_ab = SpatialIndex(pb).query(pa)
    _, d_ba = SpatialIndex(pa).query(pb)
    return 0.5 * d_ab.mean() + 0.5 * d_ba.mean()


def chamfer_l1(pred_mesh, gt_mesh, n_points=10_000, seed=0):
    """Chamfer distance between ``n_points`` surface samples of each mesh.

    ``seed`` is one integer used for both samplings, or a (pred, gt) pair.
    """
    _check_nonempty(pred_mesh, gt_mesh)
    sp, sg = _seed_pair(seed)
    return chamfer_distance(sample_surface(pred_mesh, n_points, sp).points,
                            sample_surface(gt_mesh, n_points, sg).points)


def normal_consistency_points(points_a, normals_a, points_b, normals_b):
    ia, _ = SpatialIndex(points_b).query(points_a)
    ib, _ = SpatialIndex(points_a).query(points_b)
    ab = np.abs(np.einsum("ij,ij->i", normals_a, normals_b[ia]))
    ba = np.abs(np.einsum("ij,ij->i", normals_b, normals_a[ib]))
    return float(0.5 * ab.mean() + 0.5 * ba.mean())


def normal_consistency(pred_mesh, gt_mesh, n_points=10_000, seed=0):
    """Mean |cos| between each sample's face normal and its nearest neighbour's, both ways."""
    _check_nonempty(pred_mesh, gt_mesh)
    sp, sg = _seed_pair(seed)
    a = sample_surface(pred_mesh, n_points, sp)
    b = sample_surface(gt_mesh, n_points, sg)
    return normal_consistency_points(a.points, a.normals, b.points, b.normals)
