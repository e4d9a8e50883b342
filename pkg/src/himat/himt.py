"""HIMT binary tensor files.

Layout (little-endian): magic "HIMT", version uint32, ndim uint32,
dims uint32 x ndim, dtype tag uint8 (0 = float32, 1 = float64),
row-major payload.
"""

import struct

import numpy as np

MAGIC = b"HIMT"
VERSION = 1
_TAGS = {0: np.float32, 1: np.float64}
_RTAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def write_himt(path, array):
    arr = np.ascontiguousarray(array)
    if arr.dtype not in _RTAGS:
        raise ValueError(f"unsupported dtype {arr.dtype}")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(struct.pack("<B", _RTAGS[arr.dtype]))
        fh.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def read_himt(path):
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise ValueError(f"{path}: not a HIMT file")
        version, ndim = struct.unpack("<II", fh.read(8))
        if version != VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        dims = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
        (tag,) = struct.unpack("<B", fh.read(1))
        if tag not in _TAGS:
            raise ValueError(f"{path}: unknown dtype tag {tag}")
        dtype = np.dtype(_TAGS[tag]).newbyteorder("<")
        count = int(np.prod(dims)) if ndim else 1
        data = np.frombuffer(fh.read(count * dtype.itemsize), dtype=dtype, count=count)
    return data.astype(_TAGS[tag]).reshape(dims)
