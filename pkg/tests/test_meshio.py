import os

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from doccnet import meshio
from doccnet.geometry import PointCloud, TriangleMesh, box_mesh, compute_vertex_normals, icosphere

finite = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)


@pytest.mark.parametrize("ext", [".obj", ".off"])
def test_mesh_round_trip_exact(tmp_path, ext):
    m = icosphere(0.37, 2, center=(0.1, -0.2, 1 / 3))
    path = tmp_path / f"m{ext}"
    meshio.write_mesh(path, m)
    back = meshio.read_mesh(path)
    np.testing.assert_array_equal(back.vertices, m.vertices)
    np.testing.assert_array_equal(back.triangles, m.triangles)


def test_obj_normals_round_trip(tmp_path):
    m = compute_vertex_normals(box_mesh([-0.3, -0.2, -0.1], [0.3, 0.2, 0.1]))
    meshio.write_obj(tmp_path / "n.obj", m)
    back = meshio.read_obj(tmp_path / "n.obj")
    np.testing.assert_array_equal(back.normals, m.normals)


def test_obj_indices_are_one_based(tmp_path):
    meshio.write_obj(tmp_path / "b.obj", box_mesh())
    faces = [ln for ln in (tmp_path / "b.obj").read_text().splitlines() if ln.startswith("f ")]
    idx = np.array([[int(t) for t in ln.split()[1:]] for ln in faces])
    assert idx.min() == 1 and idx.max() == 8


def test_obj_reads_foreign_forms(tmp_path):
    p = tmp_path / "x.obj"
    p.write_text("# comment\nv 0 0 0\nv 1 0 0\nv 0 1 0\nvt 0 0\nf 1/1 2/1 -1/1\n")
    m = meshio.read_obj(p)
    assert m.triangles.tolist() == [[0, 1, 2]]


def test_quads_rejected(tmp_path):
    p = tmp_path / "q.obj"
    p.write_text("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n")
    with pytest.raises(ValueError, match="triangle"):
        meshio.read_obj(p)
    q = tmp_path / "q.off"
    q.write_text("OFF\n4 1 0\n0 0 0\n1 0 0\n1 1 0\n0 1 0\n4 0 1 2 3\n")
    with pytest.raises(ValueError, match="triangle"):
        meshio.read_off(q)


def test_unknown_extension(tmp_path):
    with pytest.raises(ValueError, match="unsupported"):
        meshio.write_mesh(tmp_path / "a.stl", box_mesh())


@settings(max_examples=40, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(arrays(np.float64, (7, 3), elements=finite), st.booleans(), st.sampled_from([".xyz", ".ply"]))
def test_cloud_round_trip_property(tmp_path, pts, with_normals, ext):
    normals = np.roll(pts, 1, axis=1) if with_normals else None
    c = PointCloud(pts, normals)
    path = tmp_path / f"c{ext}"
    meshio.write_cloud(path, c)
    back = meshio.read_cloud(path)
    # the contract is 9 significant digits; the writer is exact
    np.testing.assert_array_equal(back.points, c.points)
    if with_normals:
        np.testing.assert_array_equal(back.normals, c.normals)
    else:
        assert back.normals is None


@settings(max_examples=30, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(arrays(np.float64, (5, 3), elements=finite))
def test_mesh_round_trip_property(tmp_path, verts):
    m = TriangleMesh(verts, [[0, 1, 2], [2, 3, 4], [4, 0, 1]])
    for ext in (".obj", ".off"):
        meshio.write_mesh(tmp_path / f"p{ext}", m)
        np.testing.assert_array_equal(meshio.read_mesh(tmp_path / f"p{ext}").vertices, verts)


def test_xyz_bad_columns(tmp_path):
    p = tmp_path / "bad.xyz"
    p.write_text("1 2 3 4\n")
    with pytest.raises(ValueError, match="3 or 6"):
        meshio.read_xyz(p)


def test_atomic_write_leaves_no_temp(tmp_path):
    meshio.atomic_write_text(tmp_path / "sub" / "f.txt", "hello")
    assert (tmp_path / "sub" / "f.txt").read_text() == "hello"
    assert os.listdir(tmp_path / "sub") == ["f.txt"]


# --- PGM and OCQD -----------------------------------------------------------------

def test_pgm_round_trip(tmp_path, rng):
    mask = (rng.random((7, 11)) > 0.5).astype(np.uint8)
    path = tmp_path / "m.pgm"
    meshio.write_pgm(path, mask)
    data = path.read_bytes()
    assert data.startswith(b"P5\n11 7\n255\n") and len(data) == len(b"P5\n11 7\n255\n") + 77
    np.testing.assert_array_equal(meshio.read_pgm(path), mask)


def test_pgm_header_comments_and_errors(tmp_path):
    path = tmp_path / "c.pgm"
    path.write_bytes(b"P5\n# made by hand\n2 1\n15\n\x0f\x03")
    np.testing.assert_array_equal(meshio.read_pgm(path), [[1, 0]])
    np.testing.assert_array_equal(meshio.read_pgm(path, binary=False), [[15, 3]])
    path.write_bytes(b"P2\n1 1\n255\n0\n")
    with pytest.raises(ValueError, match="P5"):
        meshio.read_pgm(path)


def test_queries_round_trip_and_errors(tmp_path, rng):
    pts, lab = rng.normal(size=(9, 3)), (rng.random(9) > 0.5).astype(float)
    path = tmp_path / "q.ocqd"
    meshio.write_queries(path, pts, lab)
    p2, l2 = meshio.read_queries(path)
    np.testing.assert_array_equal(p2, pts)
    np.testing.assert_array_equal(l2, lab)
    raw = path.read_bytes()
    path.write_bytes(raw[:-8])
    with pytest.raises(ValueError, match="truncated"):
        meshio.read_queries(path)
    path.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(ValueError, match="magic"):
        meshio.read_queries(path)
