"""Dense float64 array primitives shared by every other module.

Tensors are plain numpy arrays: C-order (row-major), dtype float64. All
functions here are pure and thread-safe. The binary format written by
:func:`tensor_to_bytes` is little-endian regardless of platform so files
round-trip bit-exactly across machines.
"""

import struct

import numpy as np

__all__ = [
    "as_tensor",
    "softmax",
    "log_sum_exp",
    "cosine_similarity",
    "argmax_last_axis",
    "tensor_to_bytes",
    "tensor_from_bytes",
    "save_tensor",
    "load_tensor",
    "debug_dump",
]


def as_tensor(data, shape=None):
    """Coerce ``data`` to a C-order float64 array, optionally reshaped."""
    arr = np.asarray(data, dtype=np.float64, order="C")
    if shape is not None:
        arr = arr.reshape(shape)
    return arr


def _check_axis(axis, ndim):
    if not -ndim <= axis < ndim:
        raise ValueError(f"axis {axis} out of range for rank-{ndim} tensor")
    return axis % ndim


def softmax(logits, axis):
    """Stable softmax along ``axis``, computed with max-subtraction.

    Entries along ``axis`` are positive and sum to 1. Inputs must be finite.
    """
    x = as_tensor(logits)
    axis = _check_axis(axis, x.ndim)
    if not np.all(np.isfinite(x)):
        raise ValueError("softmax input must be finite")
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_sum_exp(values):
    """log(sum(exp(v))) of a non-empty sequence, max-subtracted for stability."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("log_sum_exp of an empty sequence")
    if not np.all(np.isfinite(v)):
        raise ValueError("log_sum_exp input must be finite")
    m = float(v.max())
    return m + float(np.log(np.sum(np.exp(v - m))))


def cosine_similarity(u, v):
    """Cosine of the angle between two vectors, clamped into [-1, 1].

    Zero-norm inputs are rejected: silently mapping them to 0 would corrupt
    any contrast built on top of this.
    """
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    if nu == 0.0 or nv == 0.0:
        raise ValueError("cosine_similarity of a zero-norm vector")
    return float(np.clip(np.dot(u / nu, v / nv), -1.0, 1.0))


def argmax_last_axis(t):
    """Index of the maximum along the last axis; ties go to the lowest index."""
    x = np.asarray(t)
    if x.ndim < 1 or x.shape[-1] < 1:
        raise ValueError("argmax_last_axis needs a non-empty last axis")
    return np.argmax(x, axis=-1)


# Binary layout: u32 rank, u32 per dimension, then the f64 payload in
# row-major order, all little-endian.

def tensor_to_bytes(t):
    arr = np.ascontiguousarray(t, dtype=np.float64)
    header = struct.pack("<I", arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.astype("<f8", copy=False).tobytes()


def tensor_from_bytes(buf):
    (rank,) = struct.unpack_from("<I", buf, 0)
    shape = struct.unpack_from(f"<{rank}I", buf, 4)
    offset = 4 + 4 * rank
    count = int(np.prod(shape)) if rank else 1
    data = np.frombuffer(buf, dtype="<f8", count=count, offset=offset)
    expected = offset + 8 * count
    if len(buf) != expected:
        raise ValueError(f"tensor payload is {len(buf)} bytes, expected {expected}")
    return data.astype(np.float64).reshape(shape)


def save_tensor(path, t):
    with open(path, "wb") as fh:
        fh.write(tensor_to_bytes(t))


def load_tensor(path):
    with open(path, "rb") as fh:
        return tensor_from_bytes(fh.read())


def debug_dump(t):
    """Textual dump: a shape header, then one row per line."""
    arr = np.ascontiguousarray(t, dtype=np.float64)
    lines = ["shape: " + " ".join(str(d) for d in arr.shape)]
    rows = arr.reshape(-1, arr.shape[-1]) if arr.ndim > 1 else arr.reshape(1, -1)
    for row in rows:
        lines.append(" ".join(format(x, ".17g") for x in row))
    return "\n".join(lines) + "\n"
