"""Dense rank-4 tensors and the ``.t4`` binary file format.

Tensors are plain C-contiguous ``float64`` numpy arrays laid out as
(n, c, h, w). The helpers here enforce that layout and provide seeded
construction and bit-exact serialization.

``.t4`` byte layout (all integers little-endian u64)::

    offset 0   magic      8 bytes, b"T4TENSR\\0"
    offset 8   dtype      1 = float32, 2 = float64
    offset 16  rank       r
    offset 24  dims       r x u64
    ...        payload    prod(dims) raw little-endian values, row-major

Random tensors use numpy's PCG64 bit generator seeded with the given
64-bit integer, so a seed reproduces the same values on every platform.
"""
from __future__ import annotations

import os
import struct

import numpy as np

MAGIC = b"T4TENSR\x00"
DTYPE_CODES = {"f32": 1, "f64": 2}
_NUMPY_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
MAX_ELEMENTS = 2**34


class TensorFileError(ValueError):
    pass


class BadMagic(TensorFileError):
    pass


class DtypeMismatch(TensorFileError):
    pass


class Truncated(TensorFileError):
    pass


def _check_dims(dims) -> tuple[int, ...]:
    dims = tuple(int(d) for d in dims)
    if len(dims) != 4:
        raise ValueError(f"expected 4 dims (n, c, h, w), got {dims}")
    if any(d < 0 for d in dims):
        raise ValueError(f"negative dimension in {dims}")
    total = 1
    for d in dims:
        total *= d
    if total > MAX_ELEMENTS:
        raise OverflowError(f"dims {dims} exceed {MAX_ELEMENTS} elements")
    return dims


def zeros(dims) -> np.ndarray:
    return np.zeros(_check_dims(dims), dtype=np.float64)


def full(dims, value: float) -> np.ndarray:
    return np.full(_check_dims(dims), float(value), dtype=np.float64)


def rng(seed: int) -> np.random.Generator:
    """PCG64 generator for a 64-bit seed."""
    return np.random.Generator(np.random.PCG64(int(seed) & (2**64 - 1)))


def randn(dims, seed: int) -> np.ndarray:
    return rng(seed).standard_normal(_check_dims(dims))


def as_tensor4(x) -> np.ndarray:
    """Return ``x`` as a C-contiguous float64 rank-4 array (copying only if needed)."""
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if arr.ndim != 4:
        raise ValueError(f"expected a rank-4 tensor, got shape {arr.shape}")
    return arr


def assert_finite(x, name: str = "tensor") -> None:
    x = np.asarray(x)
    if not np.all(np.isfinite(x)):
        bad = np.argwhere(~np.isfinite(x))[0]
        raise FloatingPointError(f"{name} has non-finite value at index {tuple(int(i) for i in bad)}")


def save(path, t, dtype: str = "f64") -> None:
    """Write ``t`` (any rank) to ``path``; ``dtype`` is ``"f64"`` or ``"f32"``."""
    if dtype not in DTYPE_CODES:
        raise DtypeMismatch(f"unsupported dtype {dtype!r}")
    code = DTYPE_CODES[dtype]
    arr = np.ascontiguousarray(t, dtype=_NUMPY_DTYPES[code])
    header = MAGIC + struct.pack("<QQ", code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(header)
        fh.write(arr.tobytes(order="C"))
    os.replace(tmp, path)


def load(path, expect_dtype: str | None = None) -> np.ndarray:
    """Read a ``.t4`` file, always returning float64.

    ``expect_dtype`` makes a stored-dtype mismatch an error instead of a
    silent widening.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 8 or blob[:8] != MAGIC:
        raise BadMagic(f"{path}: not a .t4 file")
    if len(blob) < 24:
        raise Truncated(f"{path}: header truncated")
    code, rank = struct.unpack_from("<QQ", blob, 8)
    if code not in _NUMPY_DTYPES:
        raise DtypeMismatch(f"{path}: unknown dtype code {code}")
    if expect_dtype is not None and DTYPE_CODES.get(expect_dtype) != code:
        raise DtypeMismatch(f"{path}: stored dtype code {code}, expected {expect_dtype}")
    if rank > 16:
        raise Truncated(f"{path}: implausible rank {rank}")
    if len(blob) < 24 + 8 * rank:
        raise Truncated(f"{path}: dims truncated")
    dims = struct.unpack_from(f"<{rank}Q", blob, 24)
    dt = _NUMPY_DTYPES[code]
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    start = 24 + 8 * rank
    need = start + count * dt.itemsize
    if len(blob) < need:
        raise Truncated(f"{path}: payload has {len(blob) - start} bytes, expected {need - start}")
    if len(blob) > need:
        raise TensorFileError(f"{path}: {len(blob) - need} trailing bytes")
    arr = np.frombuffer(blob, dtype=dt, count=count, offset=start).reshape(dims)
    return arr.astype(np.float64)
