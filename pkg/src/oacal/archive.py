"""Bit-exact tensor archive: the checkpoint file format for every artifact.

Layout (all integers little-endian):

    magic   4 bytes  b"OACK"
    version u32      currently 1
    count   u32      number of entries
    entry   repeated:
        name_len u16, name UTF-8 bytes
        ndim     u8,  dims ndim x u64
        payload  prod(dims) x float32 little-endian

Payloads are 32-bit floats; writing casts, reading returns float32 arrays so
that write -> read -> write round trips are bit-identical.
"""
from __future__ import annotations

import struct
from collections.abc import Iterable, Mapping

import numpy as np

from .errors import DuplicateName, MalformedArchive, NonFinite

MAGIC = b"OACK"
VERSION = 1

__all__ = ["MAGIC", "VERSION", "archive_write", "archive_read"]


def _normalize(tensors) -> list[tuple[str, np.ndarray]]:
    if isinstance(tensors, Mapping):
        items: Iterable = tensors.items()
    else:
        items = tensors
    out = []
    for name, arr in items:
        a = np.asarray(arr)
        if a.size and not np.all(np.isfinite(a)):
            raise NonFinite(f"tensor {name!r} contains NaN or Inf")
        out.append((str(name), np.ascontiguousarray(a, dtype=np.float32)))
    return out


def archive_write(path, tensors) -> None:
    """Write named float tensors to `path`; casts payloads to float32."""
    entries = _normalize(tensors)
    seen = set()
    for name, _ in entries:
        if name in seen:
            raise DuplicateName(f"tensor name {name!r} appears twice")
        seen.add(name)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(entries)))
        for name, arr in entries:
            raw_name = name.encode("utf-8")
            if len(raw_name) > 0xFFFF:
                raise MalformedArchive(f"tensor name too long: {len(raw_name)} bytes")
            fh.write(struct.pack("<H", len(raw_name)))
            fh.write(raw_name)
            dims = arr.shape
            if len(dims) > 0xFF:
                raise MalformedArchive(f"too many dims: {len(dims)}")
            fh.write(struct.pack("<B", len(dims)))
            for d in dims:
                fh.write(struct.pack("<Q", d))
            fh.write(arr.astype("<f4", copy=False).tobytes())


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise MalformedArchive(f"truncated archive while reading {what}")
    return buf


def archive_read(path) -> dict[str, np.ndarray]:
    """Read an archive into an ordered {name: float32 ndarray} mapping."""
    out: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != MAGIC:
            raise MalformedArchive("bad magic; not a tensor archive")
        version, count = struct.unpack("<II", _read_exact(fh, 8, "header"))
        if version != VERSION:
            raise MalformedArchive(f"unsupported archive version {version}")
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2, "name length"))
            try:
                name = _read_exact(fh, name_len, "name").decode("utf-8")
            except UnicodeDecodeError as exc:
                raise MalformedArchive(f"invalid UTF-8 tensor name: {exc}") from exc
            if name in out:
                raise DuplicateName(f"tensor name {name!r} appears twice")
            (ndim,) = struct.unpack("<B", _read_exact(fh, 1, "ndim"))
            dims = struct.unpack(
                "<" + "Q" * ndim, _read_exact(fh, 8 * ndim, "dims")
            )
            n_items = 1
            for d in dims:
                n_items *= d
            payload = _read_exact(fh, 4 * n_items, f"payload of {name!r}")
            arr = np.frombuffer(payload, dtype="<f4").reshape(dims)
            out[name] = arr.copy()
        if fh.read(1):
            raise MalformedArchive("trailing bytes after the last entry")
    return out
