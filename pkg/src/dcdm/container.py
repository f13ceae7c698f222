"""Binary tensor container.

Layout (all integers little-endian)::

    b"DCDM" | version u8 | dtype u8 (0=f32, 1=f64) | ndim u8 | dims u32 * ndim | payload

The payload is the row-major array in little-endian byte order.
"""
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"DCDM"
VERSION = 1
DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODE_OF = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def encode_array(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype == np.bool_:
        arr = arr.astype(np.float32)
    code = _CODE_OF.get(arr.dtype.newbyteorder("="))
    if code is None:
        raise FormatError(f"unsupported dtype {arr.dtype}; container holds f32 or f64")
    if arr.ndim > 255:
        raise FormatError("too many dimensions")
    header = MAGIC + struct.pack("<BBB", VERSION, code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    payload = np.ascontiguousarray(arr, dtype=DTYPE_CODES[code]).tobytes()
    return header + payload


def decode_array(buf: bytes) -> np.ndarray:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise FormatError(f"bad magic {bytes(buf[:4])!r}, expected {MAGIC!r}", offset=0)
    if len(buf) < 7:
        raise FormatError("truncated header", offset=len(buf))
    version, code, ndim = struct.unpack_from("<BBB", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}, expected {VERSION}", offset=4)
    if code not in DTYPE_CODES:
        raise FormatError(f"unknown dtype code {code}", offset=5)
    dims_end = 7 + 4 * ndim
    if len(buf) < dims_end:
        raise FormatError(f"header declares {ndim} dims but ends early", offset=len(buf))
    shape = struct.unpack_from(f"<{ndim}I", buf, 7)
    dtype = DTYPE_CODES[code]
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    got = len(buf) - dims_end
    if got < expected:
        raise FormatError(
            f"truncated payload: shape {shape} needs {expected} bytes, found {got}", offset=len(buf)
        )
    if got > expected:
        raise FormatError(
            f"payload/shape mismatch: shape {shape} needs {expected} bytes, found {got}",
            offset=dims_end + expected,
        )
    arr = np.frombuffer(buf, dtype=dtype, count=expected // dtype.itemsize, offset=dims_end)
    return arr.reshape(shape).astype(dtype.newbyteorder("="))


def write_array(path, arr: np.ndarray) -> None:
    Path(path).write_bytes(encode_array(arr))


def read_array(path) -> np.ndarray:
    return decode_array(Path(path).read_bytes())
