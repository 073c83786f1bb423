"""TensorArchive: the binary weights container of a template package.

Layout (all integers little-endian)::

    b"TMPL"  u32 version  u32 count
    count x [ u16 name_len  name(utf-8)  u8 rank  rank x u32 dim  u8 dtype ]
    payloads, in header order, float32 LE row-major

dtype 0 is the only one defined (float32).
"""

from __future__ import annotations

import struct
from typing import Mapping

import numpy as np

MAGIC = b"TMPL"
VERSION = 1
DTYPE_F32 = 0


class ArchiveError(ValueError):
    """Malformed archive bytes."""


class ArchiveVersionError(ArchiveError):
    pass


def dumps(tensors: Mapping[str, np.ndarray]) -> bytes:
    header = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    payload = []
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ArchiveError(f"tensor name too long: {name[:40]}...")
        if arr.ndim > 0xFF:
            raise ArchiveError(f"tensor {name} has too many dims")
        header.append(struct.pack("<H", len(raw)) + raw)
        header.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        header.append(struct.pack("<B", DTYPE_F32))
        payload.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(header + payload)


def loads(data: bytes) -> dict[str, np.ndarray]:
    if data[:4] != MAGIC:
        raise ArchiveError("bad magic, not a tensor archive")
    try:
        version, count = struct.unpack_from("<II", data, 4)
    except struct.error:
        raise ArchiveError("truncated archive header") from None
    if version != VERSION:
        raise ArchiveVersionError(f"unsupported archive version {version} (expected {VERSION})")
    off = 12
    specs = []
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off:off + n].decode("utf-8")
            if len(name.encode("utf-8")) != n:
                raise ArchiveError("truncated tensor name")
            off += n
            (rank,) = struct.unpack_from("<B", data, off)
            off += 1
            dims = struct.unpack_from(f"<{rank}I", data, off)
            off += 4 * rank
            (dtype,) = struct.unpack_from("<B", data, off)
            off += 1
            if dtype != DTYPE_F32:
                raise ArchiveError(f"tensor {name}: unknown dtype code {dtype}")
            specs.append((name, dims))
    except (struct.error, UnicodeDecodeError) as exc:
        raise ArchiveError(f"corrupt archive header: {exc}") from None
    out: dict[str, np.ndarray] = {}
    for name, dims in specs:
        if name in out:
            raise ArchiveError(f"duplicate tensor name {name!r}")
        nbytes = 4 * int(np.prod(dims, dtype=np.int64))
        if off + nbytes > len(data):
            raise ArchiveError(f"tensor {name}: payload truncated")
        out[name] = np.frombuffer(data, dtype="<f4", count=nbytes // 4, offset=off).astype(np.float32).reshape(dims)
        off += nbytes
    if off != len(data):
        raise ArchiveError(f"{len(data) - off} trailing bytes after payloads")
    return out


def save(path, tensors: Mapping[str, np.ndarray]) -> bytes:
    data = dumps(tensors)
    with open(path, "wb") as f:
        f.write(data)
    return data


def load(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        return loads(f.read())
