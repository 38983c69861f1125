"""Binary checkpoint format.

Layout (little-endian)::

    b"ANAV"  u32 version  u32 count
    count x ( u32 name_len, name utf-8, u32 rank, rank x u64 extent, f32 payload )
    u32 meta_len, meta utf-8 ("key=value" lines)

The trailing metadata block carries model kind, modality code and the like.
"""

from __future__ import annotations

import io
import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from ..errors import FormatError

MAGIC = b"ANAV"
VERSION = 1


def encode_meta(meta: Mapping[str, object]) -> bytes:
    lines = []
    for k, v in meta.items():
        k, v = str(k), str(v)
        if "=" in k or "\n" in k or "\n" in v:
            raise ValueError(f"metadata entry {k!r} cannot be encoded as key=value")
        lines.append(f"{k}={v}")
    return "\n".join(lines).encode("utf-8")


def decode_meta(raw: bytes) -> dict[str, str]:
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as e:
        raise FormatError(f"metadata block is not UTF-8: {e}") from None
    out = {}
    for line in text.splitlines():
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"malformed metadata line {line!r}")
        k, v = line.split("=", 1)
        out[k] = v
    return out


def dumps(tensors: Mapping[str, np.ndarray], meta: Mapping[str, object] | None = None) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(tensors)))
    for name, arr in tensors.items():
        a = np.asarray(arr, dtype="<f4")  # ascontiguousarray would promote 0-d to 1-d
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", a.ndim))
        buf.write(struct.pack(f"<{a.ndim}Q", *a.shape))
        buf.write(a.tobytes())
    m = encode_meta(meta or {})
    buf.write(struct.pack("<I", len(m)))
    buf.write(m)
    return buf.getvalue()


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = memoryview(raw)
        self.pos = 0

    def take(self, n: int) -> memoryview:
        if self.pos + n > len(self.raw):
            raise FormatError(f"truncated checkpoint: need {n} bytes at offset {self.pos}")
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def loads(raw: bytes) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    r = _Reader(raw)
    if bytes(r.take(4)) != MAGIC:
        raise FormatError("not a checkpoint (bad magic)")
    version = r.u32()
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    count = r.u32()
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        try:
            name = bytes(r.take(r.u32())).decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("tensor name is not UTF-8") from None
        rank = r.u32()
        shape = struct.unpack(f"<{rank}Q", r.take(8 * rank))
        n = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(shape)
        tensors[name] = arr.astype(np.float32)
    meta = decode_meta(bytes(r.take(r.u32())))
    if r.pos != len(r.raw):
        raise FormatError(f"{len(r.raw) - r.pos} trailing bytes after checkpoint")
    return tensors, meta


def save(path, tensors: Mapping[str, np.ndarray], meta: Mapping[str, object] | None = None) -> Path:
    """Write atomically (temp file + rename)."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(dumps(tensors, meta))
    os.replace(tmp, path)
    return path


def load(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    return loads(Path(path).read_bytes())
