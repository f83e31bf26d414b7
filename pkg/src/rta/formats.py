"""Binary containers: embedding stores (RTAE) and precomputed catalogs (RTAP).

All integers are little-endian; matrices are row-major float32.
"""
from __future__ import annotations

import hashlib
import os
import struct
from pathlib import Path

import numpy as np

VERSION = 1


class ArtifactError(Exception):
    def __init__(self, path, reason):
        super().__init__(f"{path}: {reason}")
        self.path = str(path)


def atomic_write(path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    tmp.replace(path)


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _check(path, buf, pos, size):
    if pos + size > len(buf):
        raise ArtifactError(path, "truncated file")


def dump_tables(tables: dict[str, tuple[np.ndarray, np.ndarray]], dim: int) -> bytes:
    """Serialize named ``(matrix, known_mask)`` tables into an RTAE blob."""
    parts = [struct.pack("<4sIII", b"RTAE", VERSION, dim, len(tables))]
    for name, (mat, known) in tables.items():
        mat = np.ascontiguousarray(mat, dtype="<f4")
        if mat.ndim != 2 or mat.shape[1] != dim:
            raise ValueError(f"table {name} must be (rows, {dim})")
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<Q", mat.shape[0]))
        parts.append(np.ascontiguousarray(known, dtype=np.uint8).tobytes())
        parts.append(mat.tobytes())
    return b"".join(parts)


def load_tables(path) -> tuple[dict[str, tuple[np.ndarray, np.ndarray]], int]:
    buf = Path(path).read_bytes()
    _check(path, buf, 0, 16)
    magic, version, dim, count = struct.unpack_from("<4sIII", buf, 0)
    if magic != b"RTAE":
        raise ArtifactError(path, f"bad magic {magic!r}")
    if version != VERSION:
        raise ArtifactError(path, f"unsupported version {version}")
    pos = 16
    tables = {}
    for _ in range(count):
        _check(path, buf, pos, 2)
        (n,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        _check(path, buf, pos, n + 8)
        name = buf[pos : pos + n].decode()
        pos += n
        (rows,) = struct.unpack_from("<Q", buf, pos)
        pos += 8
        _check(path, buf, pos, rows * (1 + 4 * dim))
        known = np.frombuffer(buf, np.uint8, rows, pos).astype(bool)
        pos += rows
        mat = np.frombuffer(buf, "<f4", rows * dim, pos).reshape(rows, dim).copy()
        pos += rows * dim * 4
        tables[name] = (mat, known)
    return tables, dim


_RTAP = struct.Struct("<4sIIQ64s")


def dump_catalog(matrix: np.ndarray, checkpoint_hash: str) -> bytes:
    matrix = np.ascontiguousarray(matrix, dtype="<f4")
    header = _RTAP.pack(b"RTAP", VERSION, matrix.shape[1], matrix.shape[0], checkpoint_hash.encode().ljust(64, b"\0"))
    return header + matrix.tobytes()


def load_catalog(path, mmap: bool = False) -> tuple[np.ndarray, str]:
    """Return ``(matrix, checkpoint_hash)``; raises :class:`ArtifactError` on corruption."""
    path = Path(path)
    try:
        size = path.stat().st_size
        with open(path, "rb") as fh:
            head = fh.read(_RTAP.size)
    except OSError as exc:
        raise ArtifactError(path, str(exc)) from exc
    if len(head) < _RTAP.size:
        raise ArtifactError(path, "truncated header")
    magic, version, dim, rows, digest = _RTAP.unpack(head)
    if magic != b"RTAP":
        raise ArtifactError(path, f"bad magic {magic!r}")
    if version != VERSION:
        raise ArtifactError(path, f"unsupported version {version}")
    if size != _RTAP.size + rows * dim * 4:
        raise ArtifactError(path, f"expected {rows}x{dim} float32 payload, file has {size - _RTAP.size} bytes")
    if mmap:
        mat = np.memmap(path, dtype="<f4", mode="r", offset=_RTAP.size, shape=(rows, dim))
    else:
        mat = np.fromfile(path, dtype="<f4", offset=_RTAP.size).reshape(rows, dim)
    return mat, digest.rstrip(b"\0").decode()
