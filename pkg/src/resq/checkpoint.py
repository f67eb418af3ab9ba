"""Versioned little-endian binary checkpoints: named float64/int64 arrays
plus a JSON metadata blob."""
from __future__ import annotations

import json
import struct

import numpy as np

CKPT_MAGIC = b"RESQCKP1"
_DTYPES = {0: "<f8", 1: "<i8"}
_CODES = {np.dtype(np.float64): 0, np.dtype(np.int64): 1}


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    meta_blob = json.dumps(meta, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", 1, len(meta_blob)))
        fh.write(meta_blob)
        fh.write(struct.pack("<I", len(arrays)))
        for name in sorted(arrays):
            arr = np.asarray(arrays[name])
            if arr.dtype not in _CODES:
                arr = arr.astype(np.float64)
            code = _CODES[arr.dtype]
            nm = name.encode()
            fh.write(struct.pack("<H", len(nm)))
            fh.write(nm)
            fh.write(struct.pack("<BB", code, arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr).astype(_DTYPES[code]).tobytes())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != CKPT_MAGIC:
        raise CheckpointError("bad checkpoint magic")
    version, meta_len = struct.unpack("<II", blob[8:16])
    if version != 1:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off = 16
    meta = json.loads(blob[off:off + meta_len].decode())
    off += meta_len
    (n_arrays,) = struct.unpack("<I", blob[off:off + 4])
    off += 4
    arrays = {}
    for _ in range(n_arrays):
        (name_len,) = struct.unpack("<H", blob[off:off + 2])
        off += 2
        name = blob[off:off + name_len].decode()
        off += name_len
        code, ndim = struct.unpack("<BB", blob[off:off + 2])
        off += 2
        shape = struct.unpack(f"<{ndim}I", blob[off:off + 4 * ndim])
        off += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        nbytes = count * 8
        arr = np.frombuffer(blob, dtype=_DTYPES[code], offset=off,
                            count=count).reshape(shape)
        off += nbytes
        arrays[name] = arr.copy()
    if off != len(blob):
        raise CheckpointError("trailing bytes in checkpoint")
    return arrays, meta
