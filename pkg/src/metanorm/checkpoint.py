"""Binary checkpoint format.

Layout (little-endian throughout)::

    magic    8 bytes  b"ILMCKPT\\0"
    version  u32      currently 1
    count    u32      number of entries
    entry    repeated:
        name_len u32, name bytes (utf-8)
        dtype    u8   (0 = float32, 1 = float64)
        rank     u32
        extents  u32 * rank
        payload  raw little-endian element bytes
    crc      u32      CRC-32 of every preceding byte
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

from .errors import CheckpointError

MAGIC = b"ILMCKPT\0"
VERSION = 1
_DTYPE_TAGS = {np.dtype("float32"): 0, np.dtype("float64"): 1}
_TAG_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def save_checkpoint(path: str, arrays: dict) -> None:
    """Write a name -> ndarray mapping; iteration order is preserved."""
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<II", VERSION, len(arrays))
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        if arr.dtype not in _DTYPE_TAGS:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name!r}")
        encoded = name.encode("utf-8")
        blob += struct.pack("<I", len(encoded)) + encoded
        blob += struct.pack("<BI", _DTYPE_TAGS[arr.dtype], arr.ndim)
        blob += struct.pack(f"<{arr.ndim}I", *arr.shape)
        blob += np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes()
    blob += struct.pack("<I", zlib.crc32(bytes(blob)))
    with open(path, "wb") as fh:
        fh.write(bytes(blob))


def load_checkpoint(path: str) -> dict:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(MAGIC) + 12:
        raise CheckpointError("file too short to be a checkpoint")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("CRC mismatch: checkpoint is corrupted")
    if body[:8] != MAGIC:
        raise CheckpointError("bad magic bytes")
    version, count = struct.unpack_from("<II", body, 8)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    offset = 16
    out = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", body, offset)
        offset += 4
        name = body[offset : offset + name_len].decode("utf-8")
        offset += name_len
        tag, rank = struct.unpack_from("<BI", body, offset)
        offset += 5
        extents = struct.unpack_from(f"<{rank}I", body, offset)
        offset += 4 * rank
        if tag not in _TAG_DTYPES:
            raise CheckpointError(f"unknown dtype tag {tag} for {name!r}")
        dtype = _TAG_DTYPES[tag]
        n = int(np.prod(extents, dtype=np.int64)) if rank else 1
        nbytes = n * dtype.itemsize
        if offset + nbytes > len(body):
            raise CheckpointError(f"payload for {name!r} runs past end of file")
        arr = np.frombuffer(body, dtype=dtype, count=n, offset=offset).reshape(extents)
        out[name] = arr.astype(dtype.newbyteorder("="))
        offset += nbytes
    if offset != len(body):
        raise CheckpointError(f"{len(body) - offset} trailing bytes after last entry")
    return out
