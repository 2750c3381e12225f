"""Binary feature files (``.tkft``) holding one ``T x d`` float32 sequence.

Layout, with multi-byte fields in the byte order named by the flag::

    4s   magic  b"TKFT"
    H    version (1)
    B    byte-order flag: 0 little-endian, 1 big-endian
    I    T
    I    d
    f*   T*d float32 payload, row-major
    I    crc32 of the payload bytes
"""

import struct
import zlib

import numpy as np

from .errors import ContractError, FormatError

MAGIC = b"TKFT"
VERSION = 1
_ORDERS = {0: "<", 1: ">"}
_FLAGS = {"little": 0, "big": 1}
_PREFIX_SIZE = 7
_DIMS_SIZE = 8
_CRC_SIZE = 4


def encode_features(features, byteorder="little"):
    features = np.asarray(features)
    if features.ndim != 2 or min(features.shape) < 1:
        raise ContractError(f"features must be a non-empty (T, d) array, got {features.shape}")
    if byteorder not in _FLAGS:
        raise ContractError(f"byteorder must be 'little' or 'big', got {byteorder!r}")
    flag = _FLAGS[byteorder]
    order = _ORDERS[flag]
    payload = np.ascontiguousarray(features, dtype=order + "f4").tobytes()
    steps, width = features.shape
    return b"".join(
        [
            MAGIC,
            struct.pack(order + "H", VERSION),
            struct.pack("B", flag),
            struct.pack(order + "II", steps, width),
            payload,
            struct.pack(order + "I", zlib.crc32(payload)),
        ]
    )


def decode_features(data):
    """Parse a feature file's bytes into a native-order ``float32`` array."""
    if len(data) < _PREFIX_SIZE + _DIMS_SIZE:
        raise FormatError("truncated feature header", offset=len(data))
    if data[:4] != MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}", offset=0)
    flag = data[6]
    if flag not in _ORDERS:
        raise FormatError(f"bad byte-order flag {flag}", offset=6)
    order = _ORDERS[flag]
    (version,) = struct.unpack_from(order + "H", data, 4)
    if version != VERSION:
        raise FormatError(f"unsupported feature file version {version}", offset=4)
    steps, width = struct.unpack_from(order + "II", data, _PREFIX_SIZE)
    if steps < 1 or width < 1:
        raise FormatError(f"bad shape {steps}x{width}", offset=_PREFIX_SIZE)
    start = _PREFIX_SIZE + _DIMS_SIZE
    end = start + 4 * steps * width
    if len(data) < end + _CRC_SIZE:
        raise FormatError(
            f"truncated payload: expected {end + _CRC_SIZE} bytes, got {len(data)}",
            offset=len(data),
        )
    if len(data) > end + _CRC_SIZE:
        raise FormatError("trailing bytes after checksum", offset=end + _CRC_SIZE)
    payload = data[start:end]
    (stored,) = struct.unpack_from(order + "I", data, end)
    if zlib.crc32(payload) != stored:
        raise FormatError("payload checksum mismatch", offset=end)
    values = np.frombuffer(payload, dtype=order + "f4").reshape(steps, width)
    return values.astype(np.float32)


def write_features(path, features, byteorder="little"):
    data = encode_features(features, byteorder)
    with open(path, "wb") as handle:
        handle.write(data)
    return len(data)


def read_features(path):
    with open(path, "rb") as handle:
        return decode_features(handle.read())
