"""Occupancy fields, dense grid sampling, multiresolution refinement and marching cubes.

Lattice conventions: a grid with ``R`` points per axis spans its bounds with
``R - 1`` cells; point ``i`` sits at ``lo + i * (size / (R - 1))``. A corner
counts as inside when its value is strictly greater than the threshold.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .geometry import Aabb, TriangleMesh

log = logging.getLogger(__name__)

QUERY_BATCH = 65536


# ---------------------------------------------------------------------------
# fields
# ---------------------------------------------------------------------------

class OccupancyField:
    """Deterministic map from (M, 3) points to occupancy probabilities in [0, 1]."""

    bounds: Aabb = Aabb.cube()

    def __call__(self, points):
        raise NotImplementedError


class ConstantField(OccupancyField):
    def __init__(self, value, bounds=None):
        self.value = float(value)
        if bounds is not None:
            self.bounds = bounds

    def __call__(self, points):
        return np.full(len(points), self.value)


class FunctionField(OccupancyField):
    def __init__(self, fn, bounds=None):
        self.fn = fn
        if bounds is not None:
            self.bounds = bounds

    def __call__(self, points):
        return np.asarray(self.fn(points), dtype=np.float64)


class CountingField(OccupancyField):
    """Wraps a field and counts how many points were queried."""

    def __init__(self, field):
        self.field = field
        self.bounds = field.bounds
        self.count = 0

    def __call__(self, points):
        self.count += len(points)
        return self.field(points)


def query_field(field, points, batch=QUERY_BATCH):
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    out = np.empty(len(points))
    for s in range(0, len(points), batch):
        out[s:s + batch] = field(points[s:s + batch])
    return out


# ---------------------------------------------------------------------------
# grids
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class OccupancyGrid:
    values: np.ndarray
    bounds: Aabb
    exact: np.ndarray | None = None  # which values came from the field (MISE only)

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64)
        if v.ndim != 3 or len(set(v.shape)) != 1 or v.shape[0] < 2:
            raise ValueError(f"grid must be R x R x R with R >= 2, got {v.shape}")
        if np.any(v < 0) or np.any(v > 1) or not np.all(np.isfinite(v)):
            raise ValueError("grid values must lie in [0, 1]")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def resolution(self):
        return self.values.shape[0]

    def coords(self, idx):
        return lattice_coords(self.bounds, self.resolution, idx)

    def occupied_count(self, tau=0.5):
        return int(np.count_nonzero(self.values > tau))

    def occupied_fraction(self, tau=0.5):
        """Volume fraction of the bounds occupied, one lattice-spacing cell per inside point.

        There are ``(R - 1)^3`` such cells in the bounds, so this estimates the
        superlevel-set volume ratio without the ``(R / (R - 1))^3`` bias of a
        plain point fraction.
        """
        return self.occupied_count(tau) / (self.resolution - 1) ** 3


def lattice_coords(bounds, R, idx):
    """World coordinates of integer lattice indices ``idx`` (..., 3)."""
    step = bounds.size / (R - 1)
    return bounds.min + np.asarray(idx, dtype=np.float64) * step


def _lattice_points(bounds, R):
    i = np.arange(R)
    idx = np.stack(np.meshgrid(i, i, i, indexing="ij"), axis=-1).reshape(-1, 3)
    return lattice_coords(bounds, R, idx)


def evaluate_grid(field, R):
    """Sample ``field`` on the full R x R x R lattice over its bounds."""
    if R < 2:
        raise ValueError(f"grid resolution must be >= 2, got {R}")
    vals = query_field(field, _lattice_points(field.bounds, R))
    return OccupancyGrid(vals.reshape(R, R, R), field.bounds)


# ---------------------------------------------------------------------------
# multiresolution extraction
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MiseConfig:
    r0: int = 32      # initial cells per axis
    steps: int = 2    # subdivision rounds
    tau: float = 0.5

    def __post_init__(self):
        if self.r0 < 4 or self.r0 & (self.r0 - 1):
            raise ValueError(f"r0 must be a power of two >= 4, got {self.r0}")
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps}")
        if not 0.0 < self.tau < 1.0:
            raise ValueError("tau must be in (0,1)")

    @property
    def final_cells(self):
        return self.r0 << self.steps


_CORNER_OFFSETS = [(dx, dy, dz) for dz in (0, 1) for dy in (0, 1) for dx in (0, 1)]


def _cell_view(a, off):
    n = a.shape[0] - 1
    dx, dy, dz = off
    return a[dx:dx + n, dy:dy + n, dz:dz + n]


def _straddling(inside):
    all_in = np.ones(tuple(s - 1 for s in inside.shape), bool)
    any_in = np.zeros_like(all_in)
    for off in _CORNER_OFFSETS:
        c = _cell_view(inside, off)
        all_in &= c
        any_in |= c
    return any_in & ~all_in


def _upsample(v):
    """Trilinear 2x refinement of a point lattice (n -> 2n - 1)."""
    n = v.shape[0]
    m = 2 * n - 1
    out = np.zeros((m, m, m))
    out[::2, ::2, ::2] = v
    out[1::2, ::2, ::2] = 0.5 * (out[:-1:2, ::2, ::2] + out[2::2, ::2, ::2])
    out[:, 1::2, ::2] = 0.5 * (out[:, :-1:2, ::2] + out[:, 2::2, ::2])
    out[:, :, 1::2] = 0.5 * (out[:, :, :-1:2] + out[:, :, 2::2])
    return out


def mise_extract(field, cfg=MiseConfig()):
    """Refine an occupancy grid only where the tau level set passes.

    Starts from ``cfg.r0`` cells per axis, and for ``cfg.steps`` rounds splits
    every cell whose corners straddle ``tau``, querying the field at the new
    lattice points inside those cells. Points elsewhere inherit trilinear
    values from their parent cell. After each round, any straddling cell
    that still has an inherited corner gets that corner queried, repeated
    until no such cell remains, so the surface is followed into neighbouring
    cells that the coarse level missed.
    """
    Rf = cfg.final_cells
    tau = cfg.tau
    bounds = field.bounds

    def evaluate(vals, exact, mask, stride):
        idx = np.argwhere(mask & ~exact)
        if len(idx):
            vals[tuple(idx.T)] = query_field(field, lattice_coords(bounds, Rf + 1, idx * stride))
            exact[tuple(idx.T)] = True
        return len(idx)

    def follow_surface(vals, exact, stride):
        while True:
            need_cells = _straddling(vals > tau)
            uncertain = np.zeros_like(need_cells)
            for off in _CORNER_OFFSETS:
                uncertain |= ~_cell_view(exact, off)
            need_cells &= uncertain
            if not need_cells.any():
                return
            mask = np.zeros_like(exact)
            for off in _CORNER_OFFSETS:
                _cell_view(mask, off)[...] |= need_cells
            evaluate(vals, exact, mask, stride)

    stride = 1 << cfg.steps
    n = cfg.r0 + 1
    vals = np.zeros((n, n, n))
    exact = np.zeros((n, n, n), bool)
    evaluate(vals, exact, np.ones_like(exact), stride)

    for _ in range(cfg.steps):
        active = _straddling(vals > tau)
        vals = _upsample(vals)
        ex = np.zeros(vals.shape, bool)
        ex[::2, ::2, ::2] = exact
        exact = ex
        stride //= 2
        nc = active.shape[0]
        need = np.zeros_like(exact)
        for a in range(3):
            for b in range(3):
                for c in range(3):
                    need[a:a + 2 * nc:2, b:b + 2 * nc:2, c:c + 2 * nc:2] |= active
        evaluate(vals, exact, need, stride)
        follow_surface(vals, exact, stride)

    return OccupancyGrid(np.clip(vals, 0.0, 1.0), bounds, exact)


# ---------------------------------------------------------------------------
# marching cubes
# ---------------------------------------------------------------------------

# cube corner k sits at offset (k & 1, (k >> 1) & 1, (k >> 2) & 1)
_CORNERS = np.array([[(k >> a) & 1 for a in range(3)] for k in range(8)])
_EDGES = [(a, b) for a in range(8) for b in range(a + 1, 8)
          if bin(a ^ b).count("1") == 1]
_EDGE_AXIS = np.array([int(np.log2(a ^ b)) for a, b in _EDGES])
_EDGE_BASE = np.array([a for a, _ in _EDGES])


def _faces():
    faces = []
    for axis in range(3):
        u, v = [a for a in range(3) if a != axis]
        for side in (0, 1):
            cyc = []
            for cu, cv in ((0, 0), (1, 0), (1, 1), (0, 1)):
                bits = {axis: side, u: cu, v: cv}
                cyc.append(bits[0] | bits[1] << 1 | bits[2] << 2)
            normal = np.zeros(3)
            normal[axis] = 1.0 if side else -1.0
            faces.append((cyc, normal))
    return faces


_EDGE_ID = {frozenset(e): i for i, e in enumerate(_EDGES)}
_EDGE_MID = np.array([(_CORNERS[a] + _CORNERS[b]) / 2.0 for a, b in _EDGES])


def _case_loops(case):
    """Closed loops of local edge ids for one corner configuration.

    Each face contributes the segments where the surface crosses it; on a
    face with two diagonally opposite inside corners, the inside corners are
    kept apart. Segments run with the inside on the left as seen from outside
    the cube.
    """
    inside = [(case >> k) & 1 for k in range(8)]
    succ = {}
    for cyc, normal in _faces():
        fedges = [_EDGE_ID[frozenset((cyc[i], cyc[(i + 1) % 4]))] for i in range(4)]
        cross = [i for i in range(4) if inside[cyc[i]] != inside[cyc[(i + 1) % 4]]]
        if len(cross) == 2:
            segs = [(fedges[cross[0]], fedges[cross[1]], next(c for c in cyc if inside[c]))]
        elif len(cross) == 4:
            segs = [(fedges[(i - 1) % 4], fedges[i], cyc[i]) for i in range(4) if inside[cyc[i]]]
        else:
            segs = []
        for ea, eb, corner in segs:
            turn = np.cross(_EDGE_MID[eb] - _EDGE_MID[ea], _CORNERS[corner] - _EDGE_MID[ea]) @ normal
            if turn < 0:
                ea, eb = eb, ea
            succ[ea] = eb
    loops = []
    while succ:
        start = min(succ)
        loop = [start]
        nxt = succ.pop(start)
        while nxt != start:
            loop.append(nxt)
            nxt = succ.pop(nxt)
        loops.append(loop)
    return loops


def _share_face(ea, eb):
    corners = set(_EDGES[ea]) | set(_EDGES[eb])
    return any(corners <= set(cyc) for cyc, _ in _faces())


def _triangulate_loop(loop):
    """Fan-triangulate a loop, reversed so normals face decreasing occupancy.

    The apex is chosen so that no interior chord joins two edges of one cube
    face: such a chord would lie in the face and could be emitted by the
    neighbouring cube as well, leaving an edge with four triangles.
    """
    n = len(loop)
    for k in range(n):
        ring = loop[k:] + loop[:k]
        if not any(_share_face(ring[0], ring[j]) for j in range(2, n - 1)):
            break
    else:
        raise AssertionError(f"no face-safe fan for loop {loop}")
    tris = []
    for i in range(1, n - 1):
        tris += [ring[0], ring[i + 1], ring[i]]
    return tris


@lru_cache(maxsize=None)
def triangle_table():
    """(256, K) table of local edge ids, three per triangle, padded with -1.

    Built from per-face rules so neighbouring cubes always agree on how the
    surface crosses their shared face.
    """
    rows = [sum((_triangulate_loop(lp) for lp in _case_loops(case)), []) for case in range(256)]
    width = max(len(r) for r in rows)
    table = np.full((256, width), -1, dtype=np.int64)
    for i, r in enumerate(rows):
        table[i, :len(r)] = r
    table.setflags(write=False)
    return table


@dataclass(frozen=True, eq=False)
class EdgeVertices:
    """For each output vertex: the two lattice corners of its edge and the parameter t."""

    corner_a: np.ndarray
    corner_b: np.ndarray
    t: np.ndarray


def marching_cubes(grid, tau=0.5, return_edges=False):
    """Triangulate the ``tau`` level set of ``grid``.

    Vertices lie on lattice edges whose end values straddle ``tau`` and are
    shared between the cells around that edge. Triangles are oriented so
    their normals point toward lower occupancy.
    """
    if not 0.0 < tau < 1.0:
        raise ValueError("tau must be in (0,1)")
    v = grid.values
    R = v.shape[0]
    inside = v > tau
    case = np.zeros((R - 1,) * 3, dtype=np.int64)
    for k, off in enumerate(_CORNER_OFFSETS):
        case |= _cell_view(inside, off).astype(np.int64) << k
    cells = np.argwhere((case != 0) & (case != 255))
    table = triangle_table()
    if len(cells) == 0:
        mesh = TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), np.int64))
        empty = EdgeVertices(np.zeros((0, 3), np.int64), np.zeros((0, 3), np.int64), np.zeros(0))
        return (mesh, empty) if return_edges else mesh

    local = table[case[tuple(cells.T)]]                     # (C, K)
    valid = local >= 0
    cell_of = np.repeat(np.arange(len(cells)), valid.sum(axis=1))
    le = local[valid]                                        # flattened local edge ids
    base = cells[cell_of] + _CORNERS[_EDGE_BASE[le]]
    axis = _EDGE_AXIS[le]
    gid = ((axis * R + base[:, 0]) * R + base[:, 1]) * R + base[:, 2]
    uniq, inv = np.unique(gid, return_inverse=True)
    triangles = inv.reshape(-1, 3)

    ax = uniq // (R ** 3)
    rem = uniq % (R ** 3)
    ca = np.stack([rem // (R * R), (rem // R) % R, rem % R], axis=1)
    cb = ca + np.eye(3, dtype=np.int64)[ax]
    va = v[tuple(ca.T)]
    vb = v[tuple(cb.T)]
    t = (tau - va) / (vb - va)
    pa = lattice_coords(grid.bounds, R, ca)
    pb = lattice_coords(grid.bounds, R, cb)
    verts = pa + t[:, None] * (pb - pa)
    mesh = TriangleMesh(verts, triangles)
    if return_edges:
        return mesh, EdgeVertices(ca, cb, t)
    return mesh


def extract_mesh(field, cfg=MiseConfig()):
    """MISE refinement followed by marching cubes at the final resolution."""
    grid = mise_extract(field, cfg)
    return marching_cubes(grid, cfg.tau)
