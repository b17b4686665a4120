"""Binary tensor container and manifest helpers.

File layout: magic ``BTEN``, version byte 0x01, dtype byte (0 = float32,
1 = float64, 2 = uint8), ndim byte, then ndim little-endian uint32 dims,
then the raw little-endian row-major payload. In-memory math stays float64;
float parameters and generated images are stored as float32, labels as
uint8.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

__all__ = [
    "DataIntegrityError",
    "write_tensor",
    "read_tensor",
    "sha256_file",
    "write_manifest",
    "read_manifest",
]

MAGIC = b"BTEN"
VERSION = 1

_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("|u1")}
_CODE_FOR_KIND = {"f4": 0, "f8": 1, "u1": 2}


class DataIntegrityError(RuntimeError):
    """A stored tensor or manifest is corrupt, truncated or mismatched."""


def write_tensor(path, arr: np.ndarray) -> None:
    """Serialize ``arr`` (float32, float64 or uint8) to ``path``."""
    path = Path(path)
    dt = np.dtype(arr.dtype)
    key = dt.str.lstrip("<>|=")
    if key not in _CODE_FOR_KIND:
        raise ValueError(f"write_tensor: unsupported dtype {arr.dtype}")
    code = _CODE_FOR_KIND[key]
    if arr.ndim > 255:
        raise ValueError("write_tensor: too many dimensions")
    header = MAGIC + struct.pack("<BBB", VERSION, code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    payload = np.ascontiguousarray(arr, dtype=_DTYPE_CODES[code]).tobytes()
    path.write_bytes(header + payload)


def read_tensor(path) -> np.ndarray:
    """Read a tensor written by :func:`write_tensor`; validates everything."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        raise DataIntegrityError(f"{path}: missing tensor file") from None
    if len(raw) < 7 or raw[:4] != MAGIC:
        raise DataIntegrityError(f"{path}: bad magic (not a BTEN file)")
    version, code, ndim = struct.unpack("<BBB", raw[4:7])
    if version != VERSION:
        raise DataIntegrityError(f"{path}: unsupported version {version}")
    if code not in _DTYPE_CODES:
        raise DataIntegrityError(f"{path}: unknown dtype code {code}")
    off = 7 + 4 * ndim
    if len(raw) < off:
        raise DataIntegrityError(f"{path}: truncated header")
    shape = struct.unpack(f"<{ndim}I", raw[7:off])
    dt = _DTYPE_CODES[code]
    expected = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
    if len(raw) - off != expected:
        raise DataIntegrityError(
            f"{path}: payload is {len(raw) - off} bytes, expected {expected}"
        )
    arr = np.frombuffer(raw[off:], dtype=dt).reshape(shape)
    return arr.copy()


def sha256_file(path) -> str:
    h = hashlib.sha256()
    h.update(Path(path).read_bytes())
    return h.hexdigest()


def write_manifest(path, payload: dict) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def read_manifest(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except FileNotFoundError:
        raise DataIntegrityError(f"{path}: missing manifest") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise DataIntegrityError(f"{path}: manifest is not valid JSON: {e}") from None
