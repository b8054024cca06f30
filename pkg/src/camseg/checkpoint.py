"""Binary checkpoint container.

Layout: magic "CAMS", version u32, tensor count u32, then per tensor
(name len u16 + UTF-8 name, dtype code u8, rank u8, extents u32 each,
raw little-endian values), then a length-prefixed UTF-8 JSON config snapshot.
All integers little-endian.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

__all__ = ["CheckpointError", "save_checkpoint", "load_checkpoint", "VERSION"]

MAGIC = b"CAMS"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DTYPE_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class CheckpointError(IOError):
    pass


def save_checkpoint(path, tensors: dict[str, np.ndarray], config: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(tensors)))
        for name, arr in tensors.items():
            arr = np.asarray(arr)
            if arr.dtype not in _DTYPE_CODES:
                raise CheckpointError(f"unsupported dtype {arr.dtype} for tensor {name!r}")
            nb = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes())
        cfg = json.dumps(config).encode("utf-8")
        fh.write(struct.pack("<I", len(cfg)))
        fh.write(cfg)


def _read(fh, n, path):
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError(f"{path}: truncated at offset {fh.tell() - len(buf)}")
    return buf


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    with open(path, "rb") as fh:
        if _read(fh, 4, path) != MAGIC:
            raise CheckpointError(f"{path}: bad magic, not a camseg checkpoint")
        version, count = struct.unpack("<II", _read(fh, 8, path))
        if version != VERSION:
            raise CheckpointError(f"{path}: version {version} not supported (reader is v{VERSION})")
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", _read(fh, 2, path))
            name = _read(fh, nlen, path).decode("utf-8")
            code, rank = struct.unpack("<BB", _read(fh, 2, path))
            if code not in _DTYPES:
                raise CheckpointError(f"{path}: unknown dtype code {code}")
            shape = struct.unpack(f"<{rank}I", _read(fh, 4 * rank, path))
            dtype = _DTYPES[code]
            nbytes = int(np.prod(shape)) * dtype.itemsize if rank else dtype.itemsize
            data = np.frombuffer(_read(fh, nbytes, path), dtype=dtype).reshape(shape)
            tensors[name] = data.copy()
        (clen,) = struct.unpack("<I", _read(fh, 4, path))
        config = json.loads(_read(fh, clen, path).decode("utf-8"))
    return tensors, config
