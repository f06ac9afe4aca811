"""Flat binary containers for weights and relation embeddings.

"DHB1": magic, then per array: name length (u16 LE), name bytes, rank (u8),
dims (u32 LE each), float32 LE payload. "RELV1": magic, u32 count, u32 dim,
then per entry: name length (u16 LE), name bytes, dim float32 LE values.
"""
from __future__ import annotations

import os
import struct
import tempfile

import numpy as np

from .errors import InputError

DHB_MAGIC = b"DHB1"
REL_MAGIC = b"RELV1"


def atomic_write(path: str, payload: bytes):
    """Write-temp-then-rename so readers never observe a partial file."""
    dirname = os.path.dirname(os.path.abspath(path))
    os.makedirs(dirname, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=dirname, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def pack_arrays(arrays: dict) -> bytes:
    out = [DHB_MAGIC]
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        name_b = name.encode("utf-8")
        out.append(struct.pack("<H", len(name_b)))
        out.append(name_b)
        out.append(struct.pack("<B", arr.ndim))
        for dim in arr.shape:
            out.append(struct.pack("<I", dim))
        out.append(arr.tobytes())
    return b"".join(out)


def unpack_arrays(blob: bytes) -> dict:
    if blob[:4] != DHB_MAGIC:
        raise InputError("bad magic: not a DHB1 container")
    arrays = {}
    off = 4
    while off < len(blob):
        (nlen,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off:off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<B", blob, off)
        off += 1
        shape = struct.unpack_from(f"<{rank}I", blob, off)
        off += 4 * rank
        count = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=off).reshape(shape)
        off += 4 * count
        arrays[name] = arr.copy()
    return arrays


def save_arrays(path: str, arrays: dict):
    atomic_write(path, pack_arrays(arrays))


def load_arrays(path: str) -> dict:
    with open(path, "rb") as fh:
        return unpack_arrays(fh.read())


def pack_relation_table(names, vectors: np.ndarray) -> bytes:
    vectors = np.ascontiguousarray(vectors, dtype="<f4")
    if vectors.ndim != 2 or vectors.shape[0] != len(names):
        raise InputError("vectors must be [n_names, dim]")
    out = [REL_MAGIC, struct.pack("<II", len(names), vectors.shape[1])]
    for name, vec in zip(names, vectors):
        name_b = name.encode("utf-8")
        out.append(struct.pack("<H", len(name_b)))
        out.append(name_b)
        out.append(vec.tobytes())
    return b"".join(out)


def unpack_relation_table(blob: bytes):
    if blob[:5] != REL_MAGIC:
        raise InputError("bad magic: not a RELV1 checkpoint")
    count, dim = struct.unpack_from("<II", blob, 5)
    off = 13
    names, rows = [], []
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, off)
        off += 2
        names.append(blob[off:off + nlen].decode("utf-8"))
        off += nlen
        rows.append(np.frombuffer(blob, dtype="<f4", count=dim, offset=off).copy())
        off += 4 * dim
    vectors = np.stack(rows) if rows else np.zeros((0, dim), dtype=np.float32)
    return names, vectors


def save_relation_table(path: str, names, vectors: np.ndarray):
    atomic_write(path, pack_relation_table(names, vectors))


def load_relation_table(path: str):
    with open(path, "rb") as fh:
        return unpack_relation_table(fh.read())
