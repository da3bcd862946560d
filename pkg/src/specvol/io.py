"""Binary volume files (SVOL) and small CSV/JSON helpers.

SVOL layout (little endian)::

    b"SVOL" | u32 version | u32 nx | u32 ny | u32 nz | f32 payload (x fastest) | u32 crc32

The checksum covers header and payload.
"""
from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import ChecksumMismatch, FormatVersionMismatch

SVOL_MAGIC = b"SVOL"
SVOL_VERSION = 1
_HEADER = struct.Struct("<4sIIII")


def write_svol(path, volume: np.ndarray) -> None:
    vol = np.asarray(volume)
    if vol.ndim == 2:
        vol = vol[:, :, None]
    if vol.ndim != 3:
        raise ValueError("SVOL stores 2D or 3D arrays")
    if not np.all(np.isfinite(vol)):
        raise ValueError("volume has non-finite values")
    header = _HEADER.pack(SVOL_MAGIC, SVOL_VERSION, *vol.shape)
    payload = np.asarray(vol, dtype="<f4").tobytes(order="F")
    crc = zlib.crc32(header + payload) & 0xFFFFFFFF
    Path(path).write_bytes(header + payload + struct.pack("<I", crc))


def read_svol(path) -> np.ndarray:
    """Read an SVOL file; returns a float32 array indexed ``[x, y, z]``."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size + 4:
        raise ChecksumMismatch(f"{path}: truncated file")
    magic, version, nx, ny, nz = _HEADER.unpack_from(raw)
    if magic != SVOL_MAGIC:
        raise ValueError(f"{path}: not an SVOL file")
    if version != SVOL_VERSION:
        raise FormatVersionMismatch(f"{path}: SVOL version {version}")
    size = nx * ny * nz * 4
    if len(raw) != _HEADER.size + size + 4:
        raise ChecksumMismatch(f"{path}: payload length does not match header")
    (crc,) = struct.unpack_from("<I", raw, _HEADER.size + size)
    if zlib.crc32(raw[: _HEADER.size + size]) & 0xFFFFFFFF != crc:
        raise ChecksumMismatch(f"{path}: crc32 mismatch")
    data = np.frombuffer(raw, dtype="<f4", count=nx * ny * nz, offset=_HEADER.size)
    return data.reshape((nx, ny, nz), order="F").astype(np.float32)


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialize {type(o).__name__}")


def write_json(path, obj) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True, default=_json_default)
    Path(path).write_text(text + "\n")


def read_json(path):
    return json.loads(Path(path).read_text())


def write_matrix_csv(path, rows: np.ndarray, header=None, fmt="%.17g") -> None:
    """Write a 2D array as CSV with an optional header line."""
    rows = np.atleast_2d(np.asarray(rows, dtype=float))
    with open(path, "w") as fh:
        if header is not None:
            fh.write(",".join(str(h) for h in header) + "\n")
        for row in rows:
            fh.write(",".join(fmt % v for v in row) + "\n")


def read_matrix_csv(path, header: bool = True):
    lines = Path(path).read_text().splitlines()
    head = lines[0].split(",") if header and lines else None
    body = lines[1:] if header else lines
    data = np.array([[float(v) for v in ln.split(",")] for ln in body if ln])
    return head, data
