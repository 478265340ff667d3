"""Analytic training shapes: fields, occupancy queries, silhouettes and augmentation.

Shapes are signed-distance primitives posed by scale, rotation about z and
translation (applied in that order). Every posed shape must fit strictly
inside [-0.5, 0.5]^3; queries are drawn from the padded cube [-0.55, 0.55]^3.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .extraction import MiseConfig, OccupancyField, extract_mesh
from .geometry import WORLD_HALF_EXTENT, Aabb
from .nn import sigmoid

log = logging.getLogger(__name__)

KINDS = ("sphere", "box", "torus", "cylinder", "union")
SHAPE_HALF_EXTENT = 0.5
SMOOTH_SHARPNESS = 200.0
SCALE_RANGE = (0.75, 1.0)
CROP_JITTER = 0.05


@dataclass(frozen=True)
class ShapeSpec:
    """An analytic primitive plus its pose.

    ``params`` by kind: sphere ``radius``; box ``half_extents`` (3,); torus
    ``major``, ``minor`` (ring in the xy plane); cylinder ``radius``,
    ``half_height`` (axis z); union ``children`` (two ShapeSpecs in the
    union's local frame).
    """

    kind: str
    params: dict
    rotation_z: float = 0.0
    translation: tuple = (0.0, 0.0, 0.0)
    scale: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown shape kind {self.kind!r}")
        object.__setattr__(self, "translation", tuple(float(x) for x in self.translation))
        lo, hi = self.world_extent()
        if np.any(lo <= -SHAPE_HALF_EXTENT) or np.any(hi >= SHAPE_HALF_EXTENT):
            raise ValueError(f"{self.kind} shape leaves the [-0.5, 0.5]^3 cube (extent {lo}..{hi})")

    # -- geometry -----------------------------------------------------------

    def _local_extent(self):
        p = self.params
        if self.kind == "sphere":
            r = p["radius"]
            return np.full(3, -r), np.full(3, r), True
        if self.kind == "box":
            b = np.asarray(p["half_extents"], float)
            return -b, b, False
        if self.kind == "torus":
            a, z = p["major"] + p["minor"], p["minor"]
            return np.array([-a, -a, -z]), np.array([a, a, z]), True
        if self.kind == "cylinder":
            r, h = p["radius"], p["half_height"]
            return np.array([-r, -r, -h]), np.array([r, r, h]), True
        exts = [c.world_extent() for c in p["children"]]
        return (np.min([e[0] for e in exts], axis=0),
                np.max([e[1] for e in exts], axis=0), False)

    def world_extent(self):
        """Conservative axis-aligned extent of the posed shape."""
        lo, hi, round_xy = self._local_extent()
        lo, hi = lo * self.scale, hi * self.scale
        if round_xy:
            rxy = max(np.abs(lo[:2]).max(), np.abs(hi[:2]).max())
            lo = np.array([-rxy, -rxy, lo[2]])
            hi = np.array([rxy, rxy, hi[2]])
        elif self.rotation_z:
            corners = np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1])
                                for z in (lo[2], hi[2])])
            corners = corners @ _rot_z(self.rotation_z).T
            lo, hi = corners.min(axis=0), corners.max(axis=0)
        t = np.asarray(self.translation)
        return lo + t, hi + t

    def sdf(self, points):
        """Signed distance (negative inside) at world points (M, 3)."""
        p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        q = (p - np.asarray(self.translation)) @ _rot_z(self.rotation_z) / self.scale
        return self.scale * self._local_sdf(q)

    def _local_sdf(self, q):
        p = self.params
        if self.kind == "sphere":
            return np.linalg.norm(q, axis=1) - p["radius"]
        if self.kind == "box":
            d = np.abs(q) - np.asarray(p["half_extents"], float)
            return np.linalg.norm(np.maximum(d, 0.0), axis=1) + np.minimum(d.max(axis=1), 0.0)
        if self.kind == "torus":
            ring = np.hypot(q[:, 0], q[:, 1]) - p["major"]
            return np.hypot(ring, q[:, 2]) - p["minor"]
        if self.kind == "cylinder":
            d = np.stack([np.hypot(q[:, 0], q[:, 1]) - p["radius"],
                          np.abs(q[:, 2]) - p["half_height"]], axis=1)
            return np.minimum(d.max(axis=1), 0.0) + np.linalg.norm(np.maximum(d, 0.0), axis=1)
        return np.minimum.reduce([c.sdf(q) for c in p["children"]])

    # -- serialization --------------------------------------------------------

    def to_dict(self):
        params = dict(self.params)
        if self.kind == "union":
            params["children"] = [c.to_dict() for c in params["children"]]
        elif self.kind == "box":
            params["half_extents"] = [float(x) for x in params["half_extents"]]
        return {"kind": self.kind, "params": params, "rotation_z": self.rotation_z,
                "translation": list(self.translation), "scale": self.scale}

    @classmethod
    def from_dict(cls, d):
        params = dict(d["params"])
        if d["kind"] == "union":
            params["children"] = tuple(cls.from_dict(c) for c in params["children"])
        elif d["kind"] == "box":
            params["half_extents"] = tuple(params["half_extents"])
        return cls(d["kind"], params, d.get("rotation_z", 0.0),
                   tuple(d.get("translation", (0, 0, 0))), d.get("scale", 1.0))


def _rot_z(theta):
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


class ShapeField(OccupancyField):
    """Occupancy of a ShapeSpec: hard indicator, or sigmoid(-k * sdf) when smoothed."""

    def __init__(self, spec, sharpness=None):
        self.spec = spec
        self.sharpness = sharpness
        self.bounds = Aabb.cube(WORLD_HALF_EXTENT)

    def __call__(self, points):
        d = self.spec.sdf(points)
        if self.sharpness is None:
            return (d < 0).astype(np.float64)
        return sigmoid(-self.sharpness * d)


def make_field(spec, smooth=False, sharpness=SMOOTH_SHARPNESS):
    return ShapeField(spec, sharpness if smooth else None)


def sample_queries(spec, Q=1024, seed=0):
    """Uniform query points in the padded cube with exact 0/1 labels."""
    if Q < 2:
        raise ValueError("need at least 2 query points (batch moments)")
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-WORLD_HALF_EXTENT, WORLD_HALF_EXTENT, size=(Q, 3))
    return pts, make_field(spec)(pts)


_VIEW_AXES = {"x": 0, "y": 1, "z": 2}


def render_silhouette(spec, view="x", res=32, depth_samples=64):
    """Orthographic binary silhouette along ``view``.

    Rows follow the higher of the two remaining axes, columns the lower one
    (view z: rows = y, columns = x). A pixel is lit when any of the depth
    samples along its ray is inside the shape.
    """
    if res < 8:
        raise ValueError(f"silhouette resolution must be >= 8, got {res}")
    a = _VIEW_AXES[view]
    col_ax, row_ax = [i for i in range(3) if i != a]
    h = WORLD_HALF_EXTENT
    pix = -h + (np.arange(res) + 0.5) * (2 * h / res)
    dep = -h + (np.arange(depth_samples) + 0.5) * (2 * h / depth_samples)
    R, C, D = np.meshgrid(pix, pix, dep, indexing="ij")
    pts = np.empty(R.shape + (3,))
    pts[..., row_ax], pts[..., col_ax], pts[..., a] = R, C, D
    inside = make_field(spec)(pts.reshape(-1, 3)).reshape(res, res, depth_samples)
    return inside.any(axis=2).astype(np.uint8)


def augment(spec, seed):
    """Random rescale by u ~ U(0.75, 1) and a small random translation.

    The translation plays the role of a random crop for renders this package
    produces itself. A jitter that would push the shape out of the cube is
    clamped back in and logged.
    """
    rng = np.random.default_rng(seed)
    u = rng.uniform(*SCALE_RANGE)
    scale = min(max(spec.scale * u, SCALE_RANGE[0]), SCALE_RANGE[1])
    jitter = rng.uniform(-CROP_JITTER, CROP_JITTER, size=3)
    t = np.asarray(spec.translation) + jitter
    # validate the scale alone first so the jitter can be clamped independently
    out = dataclasses.replace(spec, scale=scale)
    lo, hi = out.world_extent()
    limit = SHAPE_HALF_EXTENT - 1e-6
    t_lo = -limit - (lo - np.asarray(out.translation))
    t_hi = limit - (hi - np.asarray(out.translation))
    clamped = np.clip(t, t_lo, t_hi)
    if np.any(clamped != t):
        log.debug("augment: translation jitter clamped from %s to %s", t, clamped)
    return dataclasses.replace(out, translation=tuple(clamped))


# ---------------------------------------------------------------------------
# random shapes and datasets
# ---------------------------------------------------------------------------

def random_spec(kind, rng):
    """A random in-bounds shape of ``kind`` at scale 1."""
    for _ in range(100):
        rot = float(rng.uniform(0, math.pi))
        t = tuple(rng.uniform(-0.04, 0.04, size=3))
        if kind == "sphere":
            params = {"radius": float(rng.uniform(0.25, 0.4))}
        elif kind == "box":
            params = {"half_extents": tuple(float(x) for x in rng.uniform(0.12, 0.3, size=3))}
        elif kind == "torus":
            minor = float(rng.uniform(0.07, 0.12))
            params = {"major": float(rng.uniform(0.2, 0.42 - minor)), "minor": minor}
        elif kind == "cylinder":
            params = {"radius": float(rng.uniform(0.15, 0.3)),
                      "half_height": float(rng.uniform(0.2, 0.4))}
        elif kind == "union":
            ra, rb = rng.uniform(0.14, 0.22, size=2)
            off = rng.uniform(0.12, 0.22)
            params = {"children": (
                ShapeSpec("sphere", {"radius": float(ra)}, translation=(-off, 0.0, 0.0)),
                ShapeSpec("box", {"half_extents": (float(rb),) * 3}, translation=(off, 0.0, 0.0)),
            )}
        else:
            raise ValueError(f"unknown shape kind {kind!r}")
        try:
            return ShapeSpec(kind, params, rot, t, 1.0)
        except ValueError:
            continue
    raise RuntimeError(f"could not draw an in-bounds {kind}")


@dataclass
class TrainingSample:
    spec: ShapeSpec
    silhouette: np.ndarray   # (res, res) uint8
    cloud: np.ndarray        # (n_points, 3)
    points: np.ndarray       # (Q, 3)
    labels: np.ndarray       # (Q,)
    cloud_bank: np.ndarray = None  # (K, n_points, 3); cloud_bank[0] is cloud


def ground_truth_mesh(spec, cfg=MiseConfig(32, 1)):
    """Marching-cubes mesh of the smoothed field (surface at sdf = 0)."""
    return extract_mesh(make_field(spec, smooth=True), cfg)


def cloud_seeds(seed, n_clouds):
    """Seeds of a sample's cloud bank; the first is the sample seed itself."""
    return [seed] + [int(np.random.SeedSequence([seed, k]).generate_state(1)[0])
                     for k in range(1, n_clouds)]


def make_sample(spec, seed, queries=1024, n_points=300, view="x", res=32, n_clouds=1):
    """Queries, silhouette and ``n_clouds`` independently drawn ground-truth clouds."""
    from .pointcloud import mesh_to_pointcloud

    if n_clouds < 1:
        raise ValueError(f"n_clouds must be >= 1, got {n_clouds}")
    pts, labels = sample_queries(spec, queries, seed)
    mesh = ground_truth_mesh(spec)
    bank = np.stack([mesh_to_pointcloud(mesh, n_points, s).points for s in cloud_seeds(seed, n_clouds)])
    return TrainingSample(spec, render_silhouette(spec, view, res), bank[0].copy(), pts, labels, bank)


def make_specs(kinds, count, seed, augmented=True):
    """``count`` specs per kind, optionally scale/jitter augmented."""
    ss = np.random.SeedSequence(seed)
    out = []
    for kind, child in zip(kinds, ss.spawn(len(kinds))):
        rng = np.random.default_rng(child)
        for i in range(count):
            spec = random_spec(kind, rng)
            if augmented:
                spec = augment(spec, int(rng.integers(2 ** 63)))
            out.append(spec)
    return out


def split_train_test(n_per_kind, n_kinds, seed, train_fraction=0.8):
    """Seeded 80/20 split of indices, stratified by kind (specs grouped per kind)."""
    rng = np.random.default_rng(seed)
    train, test = [], []
    for k in range(n_kinds):
        idx = k * n_per_kind + rng.permutation(n_per_kind)
        cut = max(1, int(round(train_fraction * n_per_kind))) if n_per_kind > 1 else 1
        train += sorted(idx[:cut].tolist())
        test += sorted(idx[cut:].tolist())
    return train, test


@dataclass
class ShapeDataset:
    samples: list = field(default_factory=list)

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    @classmethod
    def from_specs(cls, specs, seed=0, queries=1024, n_points=300, view="x", res=32, n_clouds=1):
        ss = np.random.SeedSequence(seed).spawn(len(specs))
        return cls([make_sample(s, int(c.generate_state(1)[0]), queries, n_points, view, res, n_clouds)
                    for s, c in zip(specs, ss)])

    def subset(self, idx):
        return ShapeDataset([self.samples[i] for i in idx])

    def silhouettes(self, idx=None):
        s = self.samples if idx is None else [self.samples[i] for i in idx]
        return np.stack([x.silhouette for x in s]).astype(np.float64)

    def clouds(self, idx=None):
        s = self.samples if idx is None else [self.samples[i] for i in idx]
        return np.stack([x.cloud for x in s])

    def cloud_banks(self):
        """(n, K, n_points, 3) stack of every sample's cloud bank (K = smallest bank)."""
        banks = [x.cloud[None] if x.cloud_bank is None else x.cloud_bank for x in self.samples]
        k = min(len(b) for b in banks)
        return np.stack([b[:k] for b in banks])


def overfit_specs():
    """Five fixed, fairly large shapes (one per kind) for overfitting runs."""
    return [
        ShapeSpec("sphere", {"radius": 0.38}),
        ShapeSpec("box", {"half_extents": (0.3, 0.22, 0.26)}, rotation_z=0.4),
        ShapeSpec("torus", {"major": 0.28, "minor": 0.13}, rotation_z=0.0),
        ShapeSpec("cylinder", {"radius": 0.26, "half_height": 0.36}),
        ShapeSpec("union", {"children": (
            ShapeSpec("sphere", {"radius": 0.22}, translation=(-0.18, 0.0, 0.0)),
            ShapeSpec("box", {"half_extents": (0.2, 0.2, 0.2)}, translation=(0.2, 0.0, 0.0)),
        )}, rotation_z=0.3),
    ]


# --- on-disk layout -----------------------------------------------------------
# <dir>/spec.json lists the samples; each sample <name> has <name>.pgm
# (silhouette), <name>.xyz (300-point cloud) and <name>.ocqd (queries + labels);
# extra ground-truth clouds of a bank go to <name>_c01.xyz, <name>_c02.xyz, ...

def save_dataset(directory, data, meta=None):
    from .geometry import PointCloud
    from .meshio import atomic_write_text, write_pgm, write_queries, write_xyz

    os.makedirs(directory, exist_ok=True)
    entries = []
    for i, s in enumerate(data.samples):
        name = f"sample_{i:04d}"
        write_pgm(os.path.join(directory, name + ".pgm"), s.silhouette)
        write_xyz(os.path.join(directory, name + ".xyz"), PointCloud(s.cloud))
        write_queries(os.path.join(directory, name + ".ocqd"), s.points, s.labels)
        bank = s.cloud_bank if s.cloud_bank is not None else s.cloud[None]
        for k in range(1, len(bank)):
            write_xyz(os.path.join(directory, f"{name}_c{k:02d}.xyz"), PointCloud(bank[k]))
        entries.append({"name": name, "spec": s.spec.to_dict(), "clouds": len(bank)})
    doc = {"version": 1, "meta": meta or {}, "samples": entries}
    atomic_write_text(os.path.join(directory, "spec.json"), json.dumps(doc, indent=1) + "\n")


def load_specs(path, index=None):
    """Specs from a ``spec.json`` (dataset index, list, or a single spec object)."""
    with open(path) as f:
        doc = json.load(f)
    if isinstance(doc, dict) and "samples" in doc:
        specs = [ShapeSpec.from_dict(e["spec"]) for e in doc["samples"]]
    elif isinstance(doc, list):
        specs = [ShapeSpec.from_dict(d) for d in doc]
    else:
        specs = [ShapeSpec.from_dict(doc)]
    return specs if index is None else specs[index]


def load_dataset(directory):
    from .meshio import read_pgm, read_queries, read_xyz

    with open(os.path.join(directory, "spec.json")) as f:
        doc = json.load(f)
    samples = []
    for e in doc["samples"]:
        base = os.path.join(directory, e["name"])
        pts, labels = read_queries(base + ".ocqd")
        bank = np.stack([read_xyz(base + ".xyz").points] +
                        [read_xyz(f"{base}_c{k:02d}.xyz").points for k in range(1, e.get("clouds", 1))])
        samples.append(TrainingSample(ShapeSpec.from_dict(e["spec"]), read_pgm(base + ".pgm"),
                                      bank[0].copy(), pts, labels, bank))
    return ShapeDataset(samples)
