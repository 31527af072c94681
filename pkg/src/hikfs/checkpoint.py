"""Self-describing binary container for named float64 arrays.

Layout: the magic string ``HIKFS01``, then one record per array
(name length u32, utf-8 name, rank u32, dims as u64 each, raw
little-endian float64 values, all little-endian), then a CRC32 of
everything before it.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

MAGIC = b"HIKFS01"


def save_arrays(path, arrays) -> None:
    """Write an ordered name -> array mapping to ``path``."""
    chunks = [MAGIC]
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype=np.float64)
        name_b = str(name).encode("utf-8")
        chunks.append(struct.pack("<I", len(name_b)))
        chunks.append(name_b)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b"")
        chunks.append(arr.astype("<f8").tobytes(order="C"))
    body = b"".join(chunks)
    with open(path, "wb") as fh:
        fh.write(body)
        fh.write(struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF))


def load_arrays(path) -> dict:
    """Read a container written by :func:`save_arrays`, verifying the CRC."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(MAGIC) + 4:
        raise ValueError(f"{path}: truncated container")
    body, crc_stored = blob[:-4], struct.unpack("<I", blob[-4:])[0]
    if zlib.crc32(body) & 0xFFFFFFFF != crc_stored:
        raise ValueError(f"{path}: checksum mismatch, file is corrupt")
    if not body.startswith(MAGIC):
        raise ValueError(f"{path}: bad magic, not a HIKFS01 container")
    out = {}
    pos = len(MAGIC)
    while pos < len(body):
        (name_len,) = struct.unpack_from("<I", body, pos)
        pos += 4
        name = body[pos:pos + name_len].decode("utf-8")
        pos += name_len
        (rank,) = struct.unpack_from("<I", body, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}Q", body, pos) if rank else ()
        pos += 8 * rank
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(body, dtype="<f8", count=count, offset=pos).astype(np.float64)
        pos += 8 * count
        out[name] = arr.reshape(dims)
    if pos != len(body):
        raise ValueError(f"{path}: trailing bytes after last record")
    return out
