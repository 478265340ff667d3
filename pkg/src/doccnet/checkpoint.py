"""Binary checkpoint format.

Layout (little endian)::

    b"OCFK"  u32 version  u64 entry_count
    entry_count x [u32 name_len, name (utf-8), u64 rows, u64 cols, rows*cols f64]

Parameters use their own names. Reserved prefixes hold everything else:
``__buffer__/<name>`` running statistics, ``__adam__/m/<name>``,
``__adam__/v/<name>``, ``__adam__/t`` and ``__adam__/hyper`` (lr, beta1,
beta2, eps) for the optimizer, and ``__meta__``, a 1 x n row of the UTF-8
bytes of a JSON object (architecture descriptor under ``"arch"`` plus training
metadata).
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .meshio import atomic_write_bytes
from .models import OccupancyNetwork
from .nn import AdamState, ParamSet

MAGIC = b"OCFK"
VERSION = 1
_RESERVED = ("__buffer__/", "__adam__/", "__meta__")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    arch: dict
    params: ParamSet
    buffers: dict
    adam: AdamState | None = None
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_network(cls, net, adam=None, meta=None):
        params = net.params.copy()
        params.zero_grad()
        buffers = {k: v.copy() for k, v in net.buffers.items()}
        adam_copy = None
        if adam is not None:
            adam_copy = AdamState(adam.lr, adam.beta1, adam.beta2, adam.eps, adam.t,
                                  {k: v.copy() for k, v in adam.m.items()},
                                  {k: v.copy() for k, v in adam.v.items()})
        return cls(dict(net.arch), params, buffers, adam_copy, dict(meta or {}))

    def to_network(self):
        net = OccupancyNetwork(self.arch, seed=0)
        if net.params.names() != self.params.names():
            raise CheckpointError("checkpoint parameters do not match its architecture")
        for k in net.params:
            net.params.set_value(k, self.params[k])
        for k in net.buffers:
            net.buffers[k][...] = self.buffers[k]
        return net

    @property
    def latent_dim(self):
        return self.arch["latent_dim"]

    def equal(self, other):
        if self.arch != other.arch or not self.params.equal(other.params):
            return False
        if self.buffers.keys() != other.buffers.keys():
            return False
        return all(np.array_equal(self.buffers[k], other.buffers[k]) for k in self.buffers)


def _entries(ckpt):
    for k, v in ckpt.params.items():
        if k.startswith(_RESERVED):
            raise CheckpointError(f"parameter name {k!r} uses a reserved prefix")
        yield k, v
    for k, v in ckpt.buffers.items():
        yield f"__buffer__/{k}", v.reshape(1, -1)
    if ckpt.adam is not None:
        a = ckpt.adam
        yield "__adam__/t", np.array([[float(a.t)]])
        yield "__adam__/hyper", np.array([[a.lr, a.beta1, a.beta2, a.eps]])
        for k in a.m:
            yield f"__adam__/m/{k}", a.m[k]
            yield f"__adam__/v/{k}", a.v[k]
    meta = dict(ckpt.meta)
    meta["arch"] = ckpt.arch
    raw = json.dumps(meta, sort_keys=True).encode("utf-8")
    yield "__meta__", np.frombuffer(raw, dtype=np.uint8).astype(np.float64).reshape(1, -1)


def to_bytes(ckpt):
    entries = list(_entries(ckpt))
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<IQ", VERSION, len(entries)))
    for name, arr in entries:
        nb = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f8")
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<QQ", arr.shape[0], arr.shape[1]))
        buf.write(arr.tobytes())
    return buf.getvalue()


def from_bytes(data):
    if data[:4] != MAGIC:
        raise CheckpointError("not an OCFK checkpoint (bad magic)")
    version, count = struct.unpack_from("<IQ", data, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 16
    params, buffers, m, v = ParamSet(), {}, {}, {}
    t, hyper, meta = None, None, None
    for _ in range(count):
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos:pos + n].decode("utf-8")
        pos += n
        rows, cols = struct.unpack_from("<QQ", data, pos)
        pos += 16
        nbytes = 8 * rows * cols
        if pos + nbytes > len(data):
            raise CheckpointError(f"truncated checkpoint entry {name!r}")
        arr = np.frombuffer(data, dtype="<f8", count=rows * cols, offset=pos).reshape(rows, cols).copy()
        pos += nbytes
        if name == "__meta__":
            meta = json.loads(arr.astype(np.uint8).tobytes().decode("utf-8"))
        elif name.startswith("__buffer__/"):
            buffers[name[len("__buffer__/"):]] = arr.reshape(-1)
        elif name == "__adam__/t":
            t = int(arr[0, 0])
        elif name == "__adam__/hyper":
            hyper = arr[0]
        elif name.startswith("__adam__/m/"):
            m[name[len("__adam__/m/"):]] = arr
        elif name.startswith("__adam__/v/"):
            v[name[len("__adam__/v/"):]] = arr
        else:
            params.add(name, arr)
    if meta is None or "arch" not in meta:
        raise CheckpointError("checkpoint has no architecture metadata")
    arch = meta.pop("arch")
    adam = None
    if t is not None:
        adam = AdamState(float(hyper[0]), float(hyper[1]), float(hyper[2]), float(hyper[3]), t, m, v)
    return Checkpoint(arch, params, buffers, adam, meta)


def save(path, ckpt):
    atomic_write_bytes(path, to_bytes(ckpt))


def load(path):
    with open(path, "rb") as f:
        return from_bytes(f.read())
