"""ASCII OBJ / OFF mesh I/O, XYZ / PLY point-cloud I/O, and the binary PGM
silhouette and OCQD query-file formats used by generated datasets.

Floats are written with ``repr``-style 17 significant digits so a write/read
round trip is exact.
"""
import os
import struct
import tempfile

import numpy as np

from .geometry import PointCloud, TriangleMesh


def _fmt(x):
    return repr(float(x))


def atomic_write_text(path, text):
    """Write ``text`` to ``path`` via a temp file in the same directory + rename."""
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_bytes(path, data):
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# --- OBJ -------------------------------------------------------------------

def format_obj(mesh):
    lines = ["# doccnet mesh"]
    lines += [f"v {_fmt(x)} {_fmt(y)} {_fmt(z)}" for x, y, z in mesh.vertices]
    if mesh.normals is not None:
        lines += [f"vn {_fmt(x)} {_fmt(y)} {_fmt(z)}" for x, y, z in mesh.normals]
        lines += [f"f {a}//{a} {b}//{b} {c}//{c}" for a, b, c in mesh.triangles + 1]
    else:
        lines += [f"f {a} {b} {c}" for a, b, c in mesh.triangles + 1]
    return "\n".join(lines) + "\n"


def write_obj(path, mesh):
    atomic_write_text(path, format_obj(mesh))


def read_obj(path):
    verts, norms, faces, face_normals = [], [], [], []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            tag = parts[0]
            if tag == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif tag == "vn":
                norms.append([float(x) for x in parts[1:4]])
            elif tag == "f":
                if len(parts) != 4:
                    raise ValueError(f"{path}:{lineno}: only triangle faces are supported")
                idx, nidx = [], []
                for tok in parts[1:]:
                    fields = tok.split("/")
                    i = int(fields[0])
                    idx.append(i - 1 if i > 0 else len(verts) + i)
                    if len(fields) == 3 and fields[2]:
                        j = int(fields[2])
                        nidx.append(j - 1 if j > 0 else len(norms) + j)
                faces.append(idx)
                face_normals.append(nidx)
    normals = None
    if norms and all(len(n) == 3 for n in face_normals):
        normals = np.zeros((len(verts), 3))
        for vi, ni in zip(faces, face_normals):
            for a, b in zip(vi, ni):
                normals[a] = norms[b]
    return TriangleMesh(np.asarray(verts, float).reshape(-1, 3),
                        np.asarray(faces, np.int64).reshape(-1, 3), normals)


# --- OFF -------------------------------------------------------------------

def write_off(path, mesh):
    lines = ["OFF", f"{mesh.n_vertices} {mesh.n_triangles} 0"]
    lines += [f"{_fmt(x)} {_fmt(y)} {_fmt(z)}" for x, y, z in mesh.vertices]
    lines += [f"3 {a} {b} {c}" for a, b, c in mesh.triangles]
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_off(path):
    with open(path) as f:
        tokens = [ln.split("#", 1)[0] for ln in f]
    tokens = " ".join(tokens).split()
    if not tokens or tokens[0] != "OFF":
        raise ValueError(f"{path}: missing OFF header")
    nv, nf = int(tokens[1]), int(tokens[2])
    pos = 4
    verts = np.asarray(tokens[pos:pos + 3 * nv], float).reshape(nv, 3)
    pos += 3 * nv
    faces = []
    for _ in range(nf):
        k = int(tokens[pos])
        if k != 3:
            raise ValueError(f"{path}: only triangle faces are supported (got {k}-gon)")
        faces.append([int(t) for t in tokens[pos + 1:pos + 4]])
        pos += 1 + k
    return TriangleMesh(verts, np.asarray(faces, np.int64).reshape(-1, 3))


# --- XYZ -------------------------------------------------------------------

def format_xyz(cloud):
    rows = cloud.points if cloud.normals is None else np.hstack([cloud.points, cloud.normals])
    return "".join(" ".join(_fmt(x) for x in row) + "\n" for row in rows)


def write_xyz(path, cloud):
    atomic_write_text(path, format_xyz(cloud))


def read_xyz(path):
    data = np.loadtxt(path, dtype=np.float64, ndmin=2)
    if data.shape[1] == 3:
        return PointCloud(data)
    if data.shape[1] == 6:
        return PointCloud(data[:, :3], data[:, 3:])
    raise ValueError(f"{path}: expected 3 or 6 columns, got {data.shape[1]}")


# --- PLY (ASCII point clouds) ----------------------------------------------

def write_ply(path, cloud):
    has_n = cloud.normals is not None
    header = ["ply", "format ascii 1.0", f"element vertex {len(cloud)}",
              "property double x", "property double y", "property double z"]
    if has_n:
        header += ["property double nx", "property double ny", "property double nz"]
    header.append("end_header")
    atomic_write_text(path, "\n".join(header) + "\n" + format_xyz(cloud))


def read_ply(path):
    with open(path) as f:
        if f.readline().strip() != "ply":
            raise ValueError(f"{path}: missing ply magic")
        n, props = None, []
        for line in f:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "format" and parts[1] != "ascii":
                raise ValueError(f"{path}: only ASCII PLY is supported")
            if parts[:2] == ["element", "vertex"]:
                n = int(parts[2])
            elif parts[0] == "property" and n is not None and parts[1] != "list":
                props.append(parts[-1])
            elif parts[0] == "end_header":
                break
        rows = [next(f).split() for _ in range(n)]
    data = np.asarray(rows, dtype=np.float64).reshape(n, len(props))
    col = {p: i for i, p in enumerate(props)}
    pts = data[:, [col["x"], col["y"], col["z"]]]
    normals = None
    if all(k in col for k in ("nx", "ny", "nz")):
        normals = data[:, [col["nx"], col["ny"], col["nz"]]]
    return PointCloud(pts, normals)


def read_mesh(path):
    ext = os.path.splitext(os.fspath(path))[1].lower()
    if ext == ".obj":
        return read_obj(path)
    if ext == ".off":
        return read_off(path)
    raise ValueError(f"unsupported mesh format: {ext!r}")


def write_mesh(path, mesh):
    ext = os.path.splitext(os.fspath(path))[1].lower()
    if ext == ".obj":
        return write_obj(path, mesh)
    if ext == ".off":
        return write_off(path, mesh)
    raise ValueError(f"unsupported mesh format: {ext!r}")


def read_cloud(path):
    ext = os.path.splitext(os.fspath(path))[1].lower()
    return read_ply(path) if ext == ".ply" else read_xyz(path)


def write_cloud(path, cloud):
    ext = os.path.splitext(os.fspath(path))[1].lower()
    return write_ply(path, cloud) if ext == ".ply" else write_xyz(path, cloud)


# --- silhouettes and query files --------------------------------------------

def write_pgm(path, image):
    """Binary (P5) 8-bit PGM; a 0/1 mask is stored as 0/255."""
    img = np.asarray(image)
    if img.ndim != 2:
        raise ValueError("image must be 2-D")
    pix = np.where(img > 0, 255, 0).astype(np.uint8) if img.max(initial=0) <= 1 else img.astype(np.uint8)
    h, w = pix.shape
    atomic_write_bytes(path, b"P5\n%d %d\n255\n" % (w, h) + pix.tobytes())


def read_pgm(path, binary=True):
    """Read a P5 PGM; with ``binary`` the result is a 0/1 uint8 mask (pixel > 127)."""
    with open(path, "rb") as f:
        data = f.read()
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while end < len(data) and not data[end:end + 1].isspace():
            end += 1
        if end == pos:
            raise ValueError(f"{path}: truncated PGM header")
        fields.append(data[pos:end])
        pos = end
    if fields[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM (P5)")
    w, h, maxval = (int(x) for x in fields[1:])
    if maxval > 255:
        raise ValueError(f"{path}: 16-bit PGM not supported")
    pix = np.frombuffer(data, np.uint8, w * h, pos + 1)
    img = pix.reshape(h, w)
    return (img > maxval // 2).astype(np.uint8) if binary else img.copy()


OCQD_MAGIC = b"OCQD"
OCQD_VERSION = 1


def write_queries(path, points, labels):
    """OCQD: magic, u32 version, u64 count, then count x (x, y, z, label) little-endian f64."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    lab = np.asarray(labels, dtype=np.float64).reshape(-1)
    if len(pts) != len(lab):
        raise ValueError("points and labels differ in length")
    rec = np.column_stack([pts, lab]).astype("<f8")
    atomic_write_bytes(path, OCQD_MAGIC + struct.pack("<IQ", OCQD_VERSION, len(rec)) + rec.tobytes())


def read_queries(path):
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != OCQD_MAGIC:
        raise ValueError(f"{path}: bad magic, not an OCQD file")
    version, n = struct.unpack_from("<IQ", data, 4)
    if version != OCQD_VERSION:
        raise ValueError(f"{path}: unsupported OCQD version {version}")
    if len(data) < 16 + 32 * n:
        raise ValueError(f"{path}: truncated query file")
    rec = np.frombuffer(data, "<f8", 4 * n, 16).reshape(n, 4).astype(np.float64)
    return rec[:, :3].copy(), rec[:, 3].copy()
