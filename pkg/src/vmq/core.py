"""Dense tensor helpers and the ``VMQ1`` tensor container.

Tensors are plain numpy arrays restricted to float32, int8, int32 and uint8.
Activation matrices are laid out ``[tokens, channels]``.

Container layout::

    b"VMQ1" | u64 LE header length | UTF-8 JSON header | zero pad to 64 | payload

The JSON header is ``{"meta": {...}, "tensors": [{"name", "dtype", "shape",
"offset", "nbytes"}, ...]}``. Offsets are relative to the payload start and
64-byte aligned. A container with no tensors and no metadata is written as the
bare 12-byte fixed header with a header length of zero.
"""

import json
import struct
from pathlib import Path

import numpy as np

from vmq import kernels

MAGIC = b"VMQ1"
ALIGN = 64
FIXED_HEADER = len(MAGIC) + 8

DTYPES = {
    "f32": np.dtype("<f4"),
    "i8": np.dtype("i1"),
    "i32": np.dtype("<i4"),
    "u8": np.dtype("u1"),
}
_DTYPE_NAMES = {np.dtype(v).newbyteorder("="): k for k, v in DTYPES.items()}


class DimensionError(ValueError):
    pass


class ContainerError(ValueError):
    """Base class for container decode/encode failures."""


class BadMagicError(ContainerError):
    pass


class TruncatedError(ContainerError):
    pass


class DuplicateNameError(ContainerError):
    pass


class UnknownDtypeError(ContainerError):
    pass


def dtype_name(arr):
    try:
        return _DTYPE_NAMES[arr.dtype.newbyteorder("=")]
    except KeyError:
        raise UnknownDtypeError(f"unsupported dtype {arr.dtype}") from None


def _check_inner(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")


def matmul(a, b):
    """float32 matrix product."""
    a = np.asarray(a, dtype=np.float32)
    b = np.asarray(b, dtype=np.float32)
    _check_inner(a, b)
    return a @ b


def int_matmul(a, b):
    """Exact int8 x int8 -> int32 product.

    Accumulation cannot overflow for inner dimension up to 2**16.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    _check_inner(a, b)
    if a.dtype != np.int8 or b.dtype != np.int8:
        raise TypeError(f"int_matmul expects int8 operands, got {a.dtype} and {b.dtype}")
    if a.shape[1] > 1 << 16:
        raise DimensionError(f"inner dimension {a.shape[1]} exceeds 2**16")
    return kernels.int_gemm(np.ascontiguousarray(a), np.ascontiguousarray(b))


def seeded_normal(seed, shape, mean=0.0, std=1.0):
    if std < 0:
        raise ValueError(f"std must be non-negative, got {std}")
    rng = np.random.default_rng(seed)
    return rng.normal(mean, std, size=shape).astype(np.float32)


# ---------------------------------------------------------------------------
# container
# ---------------------------------------------------------------------------


def _pad(n):
    return (-n) % ALIGN


def _items(tensors):
    items = tensors.items() if hasattr(tensors, "items") else tensors
    seen = set()
    out = []
    for name, arr in items:
        if not name:
            raise ContainerError("tensor names must be non-empty")
        if name in seen:
            raise DuplicateNameError(f"duplicate tensor name {name!r}")
        seen.add(name)
        out.append((name, np.asarray(arr)))
    return out


def encode_container(tensors, meta=None):
    """Serialize ``tensors`` (mapping or (name, array) pairs) to bytes."""
    items = _items(tensors)
    if not items and not meta:
        return MAGIC + struct.pack("<Q", 0)
    entries = []
    chunks = []
    offset = 0
    for name, arr in items:
        dt = dtype_name(arr)
        raw = np.ascontiguousarray(arr, dtype=DTYPES[dt]).tobytes()
        entries.append(
            {"name": name, "dtype": dt, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
        )
        chunks.append(raw)
        chunks.append(b"\0" * _pad(len(raw)))
        offset += len(raw) + _pad(len(raw))
    header = json.dumps({"meta": meta or {}, "tensors": entries}, sort_keys=True).encode("utf-8")
    head = MAGIC + struct.pack("<Q", len(header)) + header
    return head + b"\0" * _pad(len(head)) + b"".join(chunks)


def decode_container(buf):
    """Inverse of :func:`encode_container`. Returns ``(tensors, meta)``."""
    buf = memoryview(buf)
    if len(buf) < FIXED_HEADER:
        raise TruncatedError(f"container is {len(buf)} bytes, shorter than the fixed header")
    if bytes(buf[:4]) != MAGIC:
        raise BadMagicError(f"bad magic {bytes(buf[:4])!r}, expected {MAGIC!r}")
    (hlen,) = struct.unpack("<Q", buf[4:12])
    if hlen == 0:
        return {}, {}
    if FIXED_HEADER + hlen > len(buf):
        raise TruncatedError("header extends past end of file")
    try:
        header = json.loads(bytes(buf[FIXED_HEADER : FIXED_HEADER + hlen]).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"unreadable header: {exc}") from None
    base = FIXED_HEADER + hlen
    base += _pad(base)
    tensors = {}
    prev_end = 0
    for entry in sorted(header.get("tensors", []), key=lambda e: e["offset"]):
        name = entry["name"]
        if name in tensors:
            raise DuplicateNameError(f"duplicate tensor name {name!r}")
        if entry["dtype"] not in DTYPES:
            raise UnknownDtypeError(f"unknown dtype {entry['dtype']!r} for {name!r}")
        dt = DTYPES[entry["dtype"]]
        shape = tuple(entry["shape"])
        start = base + entry["offset"]
        nbytes = entry["nbytes"]
        if entry["offset"] % ALIGN:
            raise ContainerError(f"tensor {name!r} offset {entry['offset']} is not {ALIGN}-byte aligned")
        if nbytes != int(np.prod(shape, dtype=np.int64)) * dt.itemsize:
            raise ContainerError(f"tensor {name!r}: nbytes {nbytes} disagrees with shape {shape}")
        if entry["offset"] < prev_end:
            raise ContainerError(f"tensor {name!r} overlaps the previous entry")
        if start + nbytes > len(buf):
            raise TruncatedError(f"payload truncated inside tensor {name!r}")
        prev_end = entry["offset"] + nbytes
        arr = np.frombuffer(buf[start : start + nbytes], dtype=dt).reshape(shape)
        tensors[name] = arr.astype(dt.newbyteorder("="), copy=True)
    return tensors, header.get("meta", {})


def save_container(path, tensors, meta=None):
    Path(path).write_bytes(encode_container(tensors, meta))


def load_container(path, with_meta=False):
    tensors, meta = decode_container(Path(path).read_bytes())
    if with_meta:
        return tensors, meta
    return tensors
