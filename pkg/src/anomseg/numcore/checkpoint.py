"""Flat binary checkpoint format.

Layout, all little-endian:

    magic      4 bytes  b"VMAD"
    version    u32      currently 1
    count      u64      number of named arrays
    record *count:
        name_len   u32
        name       UTF-8 bytes
        ndim       u32
        dims       u64 * ndim
        values     f32 * prod(dims)

Values are always written as float32 regardless of the active compute
dtype, and the round trip file -> arrays -> file is bit-exact.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Dict, Union

import numpy as np

from ..errors import DatasetError

MAGIC = b"VMAD"
VERSION = 1


def save_checkpoint(path: Union[str, Path], arrays: Dict[str, np.ndarray]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(arrays)))
        for name, arr in arrays.items():
            raw = name.encode("utf-8")
            a = np.ascontiguousarray(arr, dtype="<f4")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", a.ndim))
            fh.write(struct.pack(f"<{a.ndim}Q", *a.shape))
            fh.write(a.tobytes())


def load_checkpoint(path: Union[str, Path]) -> Dict[str, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"checkpoint not found: {path}")
    with open(path, "rb") as fh:
        blob = fh.read()
    off = 0

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(blob):
            raise DatasetError(f"checkpoint truncated at byte {off}: {path}")
        chunk = blob[off:off + n]
        off += n
        return chunk

    if take(4) != MAGIC:
        raise DatasetError(f"bad checkpoint magic in {path}")
    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise DatasetError(f"unsupported checkpoint version {version} in {path}")
    (count,) = struct.unpack("<Q", take(8))
    arrays: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{ndim}Q", take(8 * ndim)) if ndim else ()
        n_values = 1
        for d in dims:
            n_values *= d
        values = np.frombuffer(take(4 * n_values), dtype="<f4").reshape(dims)
        arrays[name] = values.copy()
    if off != len(blob):
        raise DatasetError(f"trailing bytes in checkpoint {path}")
    return arrays
