"""Binary checkpoint container shared by encoder and GNN models.

Layout (little-endian)::

    magic      4 bytes ("STGM" encoder, "STGG" GNN)
    version    u32
    config     u32 length + UTF-8 JSON
    sections   u32 count, then per section:
                 name      u16 length + UTF-8
                 meta      u32 length + UTF-8 JSON
                 params    u32 count, then per parameter:
                             name  u16 length + UTF-8
                             ndim  u8, dims u32 * ndim
                             data  float32 * prod(dims)

Parameters are written in registry order.  Float32 storage means a float32
model reloads bit-for-bit.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import CacheError
from .io import atomic_write_bytes

VERSION = 1


def _pack_str(s: str, fmt: str = "<H") -> bytes:
    raw = s.encode("utf-8")
    return struct.pack(fmt, len(raw)) + raw


def encode_checkpoint(magic: bytes, config: dict, sections: list[tuple[str, dict, list]]) -> bytes:
    out = [magic, struct.pack("<I", VERSION), _pack_str(json.dumps(config, sort_keys=True), "<I"),
           struct.pack("<I", len(sections))]
    for name, meta, params in sections:
        out.append(_pack_str(name))
        out.append(_pack_str(json.dumps(meta, sort_keys=True), "<I"))
        out.append(struct.pack("<I", len(params)))
        for pname, arr in params:
            arr = np.asarray(arr)
            out.append(_pack_str(pname))
            out.append(struct.pack("<B", arr.ndim))
            out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
            out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CacheError("checkpoint is truncated")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self, fmt: str = "<H") -> str:
        (n,) = self.unpack(fmt)
        return self.take(n).decode("utf-8")


def decode_checkpoint(buf: bytes, magic: bytes):
    r = _Reader(buf)
    if r.take(4) != magic:
        raise CacheError(f"bad checkpoint magic, expected {magic!r}")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CacheError(f"unsupported checkpoint version {version}")
    config = json.loads(r.string("<I"))
    (n_sections,) = r.unpack("<I")
    sections = []
    for _ in range(n_sections):
        name = r.string()
        meta = json.loads(r.string("<I"))
        (count,) = r.unpack("<I")
        params = []
        for _ in range(count):
            pname = r.string()
            (ndim,) = r.unpack("<B")
            shape = r.unpack(f"<{ndim}I") if ndim else ()
            size = int(np.prod(shape, dtype=np.int64))
            arr = np.frombuffer(r.take(4 * size), dtype="<f4").reshape(shape).astype(np.float32)
            params.append((pname, arr))
        sections.append((name, meta, params))
    if r.pos != len(buf):
        raise CacheError("trailing bytes after checkpoint payload")
    return config, sections


def write_checkpoint(path, magic: bytes, config: dict, sections):
    atomic_write_bytes(path, encode_checkpoint(magic, config, sections))


def read_checkpoint(path, magic: bytes):
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read(), magic)
