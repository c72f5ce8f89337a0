"""Parameter checkpoint container ("QSCK").

Layout: magic b"QSCK", version u32 LE, then one record per parameter:
name length (u32), UTF-8 name, rank (u32), dims (u32 each), raw
little-endian float32 values. Records run until end of file.
"""

from __future__ import annotations

import hashlib
import struct

import numpy as np

from .errors import DataError

MAGIC = b"QSCK"
VERSION = 1


def save_checkpoint(path, params: dict):
    """params: ordered mapping name -> numpy array (stored as float32)."""
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        for name, arr in params.items():
            arr = np.ascontiguousarray(arr, dtype="<f4")
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load_checkpoint(path) -> dict:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != MAGIC:
        raise DataError(f"{path}: not a QSCK checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise DataError(f"{path}: unsupported QSCK version {version}")
    params = {}
    off = 8
    while off < len(blob):
        (nlen,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off:off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<I", blob, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}I", blob, off)
        off += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=off)
        off += 4 * count
        params[name] = arr.reshape(dims).copy()
    return params


def checkpoint_hash(path) -> str:
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()
