"""SSTN binary tensor container.

Layout: magic ``b"SSTN"``, u32 rank, ``rank`` x u32 dims, then the payload
as little-endian float64 in row-major order.
"""

import struct

import numpy as np

from .tensor import Tensor

MAGIC = b"SSTN"


def tensor_to_bytes(t):
    data = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
    header = MAGIC + struct.pack(f"<I{data.ndim}I", data.ndim, *data.shape)
    return header + np.ascontiguousarray(data, dtype="<f8").tobytes()


def tensor_from_bytes(buf, offset=0):
    """Decode one tensor starting at ``offset``; returns ``(tensor, next_offset)``."""
    if buf[offset:offset + 4] != MAGIC:
        raise ValueError("not an SSTN tensor (bad magic)")
    (rank,) = struct.unpack_from("<I", buf, offset + 4)
    dims = struct.unpack_from(f"<{rank}I", buf, offset + 8)
    start = offset + 8 + 4 * rank
    count = int(np.prod(dims)) if rank else 1
    end = start + 8 * count
    if end > len(buf):
        raise ValueError("truncated SSTN payload")
    data = np.frombuffer(buf[start:end], dtype="<f8").astype(np.float64).reshape(dims)
    return Tensor(data), end


def save_tensor(path, t):
    with open(path, "wb") as fh:
        fh.write(tensor_to_bytes(t))


def load_tensor(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    t, end = tensor_from_bytes(buf)
    if end != len(buf):
        raise ValueError(f"{path}: trailing bytes after tensor payload")
    return t
