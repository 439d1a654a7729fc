"""Binary tensor container and lossless frame export.

Container layout (little-endian):
    magic   4 bytes  b"IVR0"
    dtype   1 byte   code from DTYPE_CODES
    rank    1 byte
    shape   rank * uint64
    payload row-major (C order) raw bytes
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ShapeError

MAGIC = b"IVR0"

DTYPE_CODES = {
    np.dtype(np.float64): 0,
    np.dtype(np.float32): 1,
    np.dtype(np.int64): 2,
    np.dtype(np.uint8): 3,
}
CODE_DTYPES = {v: k for k, v in DTYPE_CODES.items()}


def save_tensor(path: str | Path, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr)
    if arr.dtype not in DTYPE_CODES:
        raise ShapeError(f"unsupported dtype {arr.dtype} for container")
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<BB", DTYPE_CODES[arr.dtype], arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        f.write(arr.tobytes())
    os.replace(tmp, path)


def load_tensor(path: str | Path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC:
            raise ShapeError(f"bad magic {magic!r}, expected {MAGIC!r}")
        code, rank = struct.unpack("<BB", f.read(2))
        if code not in CODE_DTYPES:
            raise ShapeError(f"unknown dtype code {code}")
        shape = struct.unpack(f"<{rank}Q", f.read(8 * rank))
        dtype = CODE_DTYPES[code]
        n = int(np.prod(shape)) if rank else 1
        payload = f.read(n * dtype.itemsize)
        if len(payload) != n * dtype.itemsize:
            raise ShapeError("truncated payload")
        return np.frombuffer(payload, dtype=dtype).reshape(shape).copy()


def write_frames_png(dirpath: str | Path, frames: np.ndarray,
                     prefix: str = "frame") -> list[Path]:
    """Write [T,H,W,C] frames in [0,1] as 16-bit grayscale PNGs."""
    dirpath = Path(dirpath)
    dirpath.mkdir(parents=True, exist_ok=True)
    if frames.ndim != 4:
        raise ShapeError(f"expected [T,H,W,C], got {frames.shape}")
    paths = []
    for k in range(frames.shape[0]):
        img = np.clip(frames[k, :, :, 0], 0.0, 1.0)
        data = (img * 65535.0).round().astype(np.uint16)
        p = dirpath / f"{prefix}_{k:04d}.png"
        Image.fromarray(data, mode="I;16").save(p)
        paths.append(p)
    return paths
