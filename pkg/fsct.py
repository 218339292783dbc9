"""
FSCT container: the single binary format for checkpoints, volumes,
sinograms, shape models and federated payloads.

Layout (little-endian):
    b"FSCT" | u32 version | u32 count
    per array: u16 name length | name (utf-8) | u8 rank | u64 extents[rank] | f64 data
"""

import struct
from pathlib import Path
from typing import Dict, Mapping

import numpy as np

from errors import FormatError

MAGIC = b"FSCT"
VERSION = 1

_HEADER = struct.Struct("<4sII")
_NAME_LEN = struct.Struct("<H")
_RANK = struct.Struct("<B")


def dumps(arrays: Mapping[str, np.ndarray]) -> bytes:
    """Serialize named arrays in insertion order."""
    parts = [_HEADER.pack(MAGIC, VERSION, len(arrays))]
    for name, value in arrays.items():
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise FormatError(f"Array name too long: {name[:40]}...")
        data = np.ascontiguousarray(value, dtype="<f8")
        if data.ndim > 0xFF:
            raise FormatError(f"Array '{name}' has unsupported rank {data.ndim}")
        parts.append(_NAME_LEN.pack(len(encoded)))
        parts.append(encoded)
        parts.append(_RANK.pack(data.ndim))
        parts.append(struct.pack(f"<{data.ndim}Q", *data.shape))
        parts.append(data.tobytes(order="C"))
    return b"".join(parts)


def loads(payload: bytes) -> Dict[str, np.ndarray]:
    """Parse a container produced by dumps(); arrays come back as float64."""
    view = memoryview(payload)
    if len(view) < _HEADER.size:
        raise FormatError("Truncated FSCT header")
    magic, version, count = _HEADER.unpack_from(view, 0)
    if magic != MAGIC:
        raise FormatError(f"Bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"Unsupported FSCT version {version}")

    offset = _HEADER.size
    arrays: Dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (name_len,) = _NAME_LEN.unpack_from(view, offset)
            offset += _NAME_LEN.size
            name = bytes(view[offset:offset + name_len]).decode("utf-8")
            offset += name_len
            (rank,) = _RANK.unpack_from(view, offset)
            offset += _RANK.size
            extents = struct.unpack_from(f"<{rank}Q", view, offset)
            offset += 8 * rank
            size = int(np.prod(extents, dtype=np.int64)) if rank else 1
            nbytes = 8 * size
            if offset + nbytes > len(view):
                raise FormatError(f"Truncated data for array '{name}'")
            data = np.frombuffer(view[offset:offset + nbytes], dtype="<f8").astype(np.float64)
            offset += nbytes
            if name in arrays:
                raise FormatError(f"Duplicate array name '{name}'")
            arrays[name] = data.reshape(extents)
    except struct.error as exc:
        raise FormatError(f"Truncated FSCT container: {exc}") from exc
    if offset != len(view):
        raise FormatError(f"{len(view) - offset} trailing bytes after FSCT container")
    return arrays


def save(path, arrays: Mapping[str, np.ndarray]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(dumps(arrays))
    return path


def load(path) -> Dict[str, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise FormatError(f"FSCT file not found: {path}")
    return loads(path.read_bytes())


def array_names(payload: bytes) -> list[str]:
    """Names stored in a container, in order (used by the wire privacy scan)."""
    return list(loads(payload).keys())


def text_array(text: str) -> np.ndarray:
    """Utf-8 bytes of a string as a float64 vector (identifiers inside containers)."""
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.float64)


def array_text(values: np.ndarray) -> str:
    try:
        return bytes(np.asarray(values, dtype=np.float64).astype(np.uint8)).decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError(f"Text array is not valid utf-8: {exc}") from exc
