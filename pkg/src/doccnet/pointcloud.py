"""Mesh -> fixed-size point cloud conversion between the two reconstruction stages."""
import numpy as np

from .geometry import PointCloud, sample_surface

OVERSAMPLE = 10


def farthest_point_sample(cloud, k, seed=None):
    """Greedy farthest-point subset of ``k`` points, in selection order.

    Starts at the point nearest the centroid; ties go to the lowest index.
    The procedure is deterministic, so ``seed`` has no effect and is accepted
    only to match the other sampling entry points.
    """
    pts = cloud.points
    n = len(pts)
    if not 1 <= k <= n:
        raise ValueError(f"cannot pick {k} points from a cloud of {n}")
    centroid = pts.mean(axis=0)
    first = int(np.argmin(np.sum((pts - centroid) ** 2, axis=1)))
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = first
    dist = np.sum((pts - pts[first]) ** 2, axis=1)
    dist[first] = -1.0
    for i in range(1, k):
        j = int(np.argmax(dist))
        chosen[i] = j
        np.minimum(dist, np.sum((pts - pts[j]) ** 2, axis=1), out=dist)
        dist[chosen[:i + 1]] = -1.0
    return cloud.subset(chosen)


def mesh_to_pointcloud(mesh, n=300, seed=0):
    """Area-weighted surface samples (10x oversampled) thinned to ``n`` by FPS.

    Connectivity is dropped; normals are those of the owning faces.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    dense = sample_surface(mesh, OVERSAMPLE * n, seed)
    return farthest_point_sample(dense, n)
