"""Little-endian container of named arrays used by graph and model checkpoints.

Layout::

    magic      8 bytes   (e.g. b"GIFFGRPH", b"GIFFMODL")
    version    uint32
    n_sections uint32
    then per section:
        name_len  uint16, name (utf-8)
        dtype     uint8    0=float64 1=int64 2=int32 3=utf-8 text
        ndim      uint8
        shape     ndim x uint64
        payload   C-order (row-major) little-endian bytes

Config scalars live in a text section named ``config`` holding ``key=value``
lines, so the files stay self-describing.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

VERSION = 1

_CODES = {np.dtype("<f8"): 0, np.dtype("<i8"): 1, np.dtype("<i4"): 2}
_DTYPES = {v: k for k, v in _CODES.items()}
_TEXT = 3


class CheckpointError(ValueError):
    pass


def _as_le(arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr)
    if arr.dtype.kind == "f":
        return np.ascontiguousarray(arr, dtype="<f8")
    if arr.dtype == np.int32:
        return np.ascontiguousarray(arr, dtype="<i4")
    if arr.dtype.kind in "iub":
        return np.ascontiguousarray(arr, dtype="<i8")
    raise CheckpointError(f"unsupported dtype {arr.dtype}")


def write_sections(path, magic: bytes, sections: dict) -> None:
    """Write ``sections`` (name -> ndarray or str) in insertion order."""
    if len(magic) != 8:
        raise ValueError("magic must be 8 bytes")
    parts = [magic, struct.pack("<II", VERSION, len(sections))]
    for name, value in sections.items():
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw_name)) + raw_name)
        if isinstance(value, str):
            payload = value.encode("utf-8")
            parts.append(struct.pack("<BBQ", _TEXT, 1, len(payload)))
            parts.append(payload)
            continue
        arr = _as_le(value)
        parts.append(struct.pack("<BB", _CODES[arr.dtype], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes(order="C"))
    Path(path).write_bytes(b"".join(parts))


def read_sections(path, magic: bytes) -> dict:
    buf = Path(path).read_bytes()
    if buf[:8] != magic:
        raise CheckpointError(f"{path}: bad magic {buf[:8]!r}, expected {magic!r}")
    version, count = struct.unpack_from("<II", buf, 8)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    pos = 16
    out: dict = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos:pos + nlen].decode("utf-8")
            pos += nlen
            code, ndim = struct.unpack_from("<BB", buf, pos)
            pos += 2
            shape = struct.unpack_from(f"<{ndim}Q", buf, pos)
            pos += 8 * ndim
            if code == _TEXT:
                out[name] = buf[pos:pos + shape[0]].decode("utf-8")
                pos += shape[0]
                continue
            dt = _DTYPES[code]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            out[name] = np.frombuffer(buf, dtype=dt, count=nbytes // dt.itemsize, offset=pos).reshape(shape).copy()
            pos += nbytes
    except (struct.error, KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: truncated or corrupt ({exc})") from exc
    if pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - pos} trailing bytes")
    return out


def format_kv(values: dict) -> str:
    return "".join(f"{k}={_fmt(v)}\n" for k, v in values.items())


def parse_kv(text: str) -> dict:
    out = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"expected key=value, got {line!r}")
        out[key.strip()] = value.strip()
    return out


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return ",".join(_fmt(x) for x in v)
    return str(v)
