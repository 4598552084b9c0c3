"""Binary parameter checkpoints.

Layout (little-endian)::

    b"PCKP"  u32 version=1  u32 party_count
    per party:   u32 party_id  u32 param_count
    per param:   u32 name_len  name (utf-8)  u32 rank  u32 dims[rank]  f64 values[prod(dims)]
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"PCKP"
VERSION = 1
_U32 = struct.Struct("<I")


class CheckpointError(ValueError):
    pass


def dumps(parties: list[dict[str, np.ndarray]]) -> bytes:
    out = [MAGIC, _U32.pack(VERSION), _U32.pack(len(parties))]
    for pid, params in enumerate(parties):
        out += [_U32.pack(pid), _U32.pack(len(params))]
        for name in sorted(params):
            value = np.ascontiguousarray(params[name], dtype="<f8")
            raw = name.encode("utf-8")
            out += [_U32.pack(len(raw)), raw, _U32.pack(value.ndim)]
            out += [_U32.pack(d) for d in value.shape]
            out.append(value.tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, data: bytes) -> None:
        self.data = data
        self.pos = 0

    def take(self, size: int) -> bytes:
        if self.pos + size > len(self.data):
            raise CheckpointError("truncated checkpoint")
        chunk = self.data[self.pos : self.pos + size]
        self.pos += size
        return chunk

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]


def loads(data: bytes) -> list[dict[str, np.ndarray]]:
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise CheckpointError("not a checkpoint")
    if r.u32() != VERSION:
        raise CheckpointError("unsupported checkpoint version")
    parties = []
    for expected in range(r.u32()):
        if r.u32() != expected:
            raise CheckpointError("party blocks out of order")
        params = {}
        for _ in range(r.u32()):
            name = r.take(r.u32()).decode("utf-8")
            dims = [r.u32() for _ in range(r.u32())]
            count = int(np.prod(dims)) if dims else 1
            params[name] = np.frombuffer(r.take(8 * count), dtype="<f8").astype(np.float64).reshape(dims)
        parties.append(params)
    if r.pos != len(data):
        raise CheckpointError("trailing bytes after checkpoint")
    return parties


def save(path, parties: list[dict[str, np.ndarray]]) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(parties))


def load(path) -> list[dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        return loads(fh.read())
