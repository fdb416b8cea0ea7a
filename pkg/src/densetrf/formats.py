"""Little-endian binary containers for feature grids, logits and checkpoints.

Grid files (features ``DTRF-F``, prediction logits ``DTRF-P``)::

    magic (6 bytes) | version u16 | H u32 | W u32 | C u32 | patch_size u32 | float32[H*W*C]

Checkpoint files (``DTRF-C``)::

    magic | version u16 | entry count u32 |
    per entry: name length u32 | name utf-8 | rank u32 | dims u32[rank] | float32 payload
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
FEATURE_MAGIC = b"DTRF-F"
PREDICTION_MAGIC = b"DTRF-P"
CHECKPOINT_MAGIC = b"DTRF-C"

_GRID_HEADER = struct.Struct("<6sHIIII")
_CKPT_HEADER = struct.Struct("<6sHI")


class FormatError(ValueError):
    """Malformed header or payload in a DTRF binary file."""


class PayloadShapeError(FormatError):
    """Payload length disagrees with the shape declared in the header."""


def write_grid(path, data: np.ndarray, patch_size: int, magic: bytes = FEATURE_MAGIC) -> None:
    data = np.asarray(data)
    if data.ndim != 3:
        raise ValueError(f"grid must be H x W x C, got shape {data.shape}")
    h, w, c = data.shape
    header = _GRID_HEADER.pack(magic, FORMAT_VERSION, h, w, c, patch_size)
    payload = np.ascontiguousarray(data, dtype="<f4").tobytes()
    Path(path).write_bytes(header + payload)


def read_grid(path, magic: bytes = FEATURE_MAGIC) -> tuple[np.ndarray, int]:
    """Return ``(data, patch_size)`` from a grid file."""
    raw = Path(path).read_bytes()
    if len(raw) < _GRID_HEADER.size:
        raise FormatError(f"{path}: file shorter than header ({len(raw)} bytes)")
    found, version, h, w, c, patch = _GRID_HEADER.unpack_from(raw)
    if found != magic:
        raise FormatError(f"{path}: bad magic {found!r}, expected {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    payload = raw[_GRID_HEADER.size:]
    expected = h * w * c * 4
    if len(payload) != expected:
        raise PayloadShapeError(
            f"{path}: header declares {h}x{w}x{c} ({expected} bytes), payload has {len(payload)}"
        )
    data = np.frombuffer(payload, dtype="<f4").reshape(h, w, c).astype(np.float32)
    return data, patch


def write_checkpoint(path, entries: "OrderedDict[str, np.ndarray]") -> None:
    chunks = [_CKPT_HEADER.pack(CHECKPOINT_MAGIC, FORMAT_VERSION, len(entries))]
    for name, value in entries.items():
        value = np.asarray(value)
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack(f"<I{value.ndim}I", value.ndim, *value.shape))
        chunks.append(np.ascontiguousarray(value, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_checkpoint(path) -> "OrderedDict[str, np.ndarray]":
    raw = Path(path).read_bytes()
    if len(raw) < _CKPT_HEADER.size:
        raise FormatError(f"{path}: file shorter than header")
    magic, version, count = _CKPT_HEADER.unpack_from(raw)
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    offset = _CKPT_HEADER.size
    entries: OrderedDict[str, np.ndarray] = OrderedDict()
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<I", raw, offset)
            offset += 4
            name = raw[offset:offset + name_len].decode("utf-8")
            offset += name_len
            (rank,) = struct.unpack_from("<I", raw, offset)
            offset += 4
            dims = struct.unpack_from(f"<{rank}I", raw, offset)
            offset += 4 * rank
            nbytes = int(np.prod(dims, dtype=np.int64)) * 4
            if offset + nbytes > len(raw):
                raise PayloadShapeError(f"{path}: entry {name!r} truncated")
            entries[name] = np.frombuffer(raw[offset:offset + nbytes], dtype="<f4").reshape(dims).copy()
            offset += nbytes
    except struct.error as exc:
        raise FormatError(f"{path}: truncated checkpoint ({exc})") from exc
    if offset != len(raw):
        raise FormatError(f"{path}: {len(raw) - offset} trailing bytes")
    return entries
