"""Binary checkpoint files for named float64 parameter sets.

Layout (all integers little-endian):

    bytes 0..7   magic b"PTCKPT\\x00\\x01"
    u32          format version (currently 1)
    u32          entry count
    per entry:
        u16      name length in bytes
        bytes    name (utf-8)
        u8       ndim
        u32*ndim dims
        f64*prod payload, C order

Entries keep their insertion order, so save -> load -> save is
byte-identical and load -> save round-trips bit-exactly.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"PTCKPT\x00\x01"
VERSION = 1


class CheckpointError(Exception):
    """Malformed, truncated, or wrong-version checkpoint file."""


def save_checkpoint(path, arrays: dict[str, np.ndarray]) -> None:
    """Write named arrays (dict order preserved) to ``path``."""
    out = bytearray()
    out += MAGIC
    out += struct.pack("<II", VERSION, len(arrays))
    for name, arr in arrays.items():
        a = np.asarray(arr, dtype=np.float64)  # tobytes() below serializes C-order regardless of layout
        nb = name.encode("utf-8")
        if len(nb) > 0xFFFF:
            raise CheckpointError(f"parameter name too long: {len(nb)} bytes")
        if a.ndim > 0xFF:
            raise CheckpointError(f"too many dimensions: {a.ndim}")
        out += struct.pack("<H", len(nb)) + nb
        out += struct.pack("<B", a.ndim)
        out += struct.pack(f"<{a.ndim}I", *a.shape) if a.ndim else b""
        out += a.astype("<f8", copy=False).tobytes()
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    """Read a checkpoint back into an ordered name -> float64 array dict."""
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) + 8 or raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    off = len(MAGIC)
    version, count = struct.unpack_from("<II", raw, off)
    off += 8
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        try:
            (nlen,) = struct.unpack_from("<H", raw, off)
            off += 2
            name = raw[off : off + nlen].decode("utf-8")
            off += nlen
            (ndim,) = struct.unpack_from("<B", raw, off)
            off += 1
            dims = struct.unpack_from(f"<{ndim}I", raw, off) if ndim else ()
            off += 4 * ndim
            n = 1
            for d in dims:
                n *= d
            end = off + 8 * n
            if end > len(raw):
                raise CheckpointError(f"{path}: truncated payload for {name!r}")
            arrays[name] = np.frombuffer(raw, dtype="<f8", count=n, offset=off).reshape(dims).copy()
            off = end
        except struct.error as exc:
            raise CheckpointError(f"{path}: truncated checkpoint ({exc})") from exc
    if off != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - off} trailing bytes")
    return arrays
