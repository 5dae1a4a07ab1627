"""Binary model files.

Layout (little-endian)::

    "BNDM" | version u8 | n u32 | n x u32 layer sizes | params x float64 | CRC-32 u32

Layer sizes are the architecture ``(d, h1, ..., hk, U)``; parameters follow
the canonical flat order of ``collabdbn.dbn.flatten``. The GRBM's gamma is
not stored and loads as 1.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from .dbn import DbnModel, flatten, param_count, unflatten_model, validate_arch
from .errors import ConfigError, ModelFormatError

MAGIC = b"BNDM"
VERSION = 0x01


def encode_model(model: DbnModel) -> bytes:
    if not np.all(model.grbm.gamma == 1.0):
        raise ConfigError("model files store gamma = 1 only")
    arch = model.arch
    body = MAGIC + bytes([VERSION]) + struct.pack(f"<I{len(arch)}I", len(arch), *arch)
    body += flatten(model).astype("<f8").tobytes()
    return body + struct.pack("<I", zlib.crc32(body))


def decode_model(data: bytes) -> DbnModel:
    data = bytes(data)
    if len(data) < 13 or data[:4] != MAGIC:
        raise ModelFormatError("not a model file (bad magic)")
    if data[4] != VERSION:
        raise ModelFormatError(f"unsupported model file version {data[4]}")
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) != crc:
        raise ModelFormatError("model file corrupt (CRC mismatch)")
    (n,) = struct.unpack_from("<I", data, 5)
    off = 9 + 4 * n
    if off > len(data) - 4:
        raise ModelFormatError("model file truncated in header")
    try:
        arch = validate_arch(struct.unpack_from(f"<{n}I", data, 9))
    except ConfigError as exc:
        raise ModelFormatError(f"invalid architecture: {exc}") from None
    count = param_count(arch)
    if len(data) - 4 - off != 8 * count:
        raise ModelFormatError(f"expected {count} parameters for architecture {arch}")
    flat = np.frombuffer(data, dtype="<f8", count=count, offset=off).astype(float)
    return unflatten_model(flat, arch)


def save_model(model: DbnModel, path) -> None:
    Path(path).write_bytes(encode_model(model))


def load_model(path) -> DbnModel:
    path = Path(path)
    if not path.is_file():
        raise ModelFormatError(f"{path}: no such model file")
    return decode_model(path.read_bytes())
