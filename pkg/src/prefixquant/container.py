"""Binary tensor container.

Layout::

    b"PQTM" | version u32 LE | header_len u64 LE | UTF-8 JSON header | payload

The header maps every tensor name to ``{shape, dtype: "f32", offset, length}``
(offsets relative to the payload start) and carries free-form metadata such as
the model config. Payload tensors are raw little-endian float32, written in
sorted name order so that identical content yields identical bytes.
"""

from __future__ import annotations

import json
import math
import struct
from pathlib import Path

import numpy as np

MAGIC = b"PQTM"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")


class ContainerError(ValueError):
    """Base class for container parse errors."""


class BadMagicError(ContainerError):
    pass


class TruncatedError(ContainerError):
    pass


class LayoutError(ContainerError):
    """Header is readable but inconsistent (shape vs length, overlaps, dtype)."""


def dumps_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def encode(tensors: dict[str, np.ndarray], meta: dict) -> bytes:
    entries = {}
    chunks = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        raw = arr.tobytes()
        entries[name] = {"shape": list(arr.shape), "dtype": "f32", "offset": offset, "length": len(raw)}
        chunks.append(raw)
        offset += len(raw)
    header = dumps_json({"tensors": entries, **meta})
    return _PREFIX.pack(MAGIC, VERSION, len(header)) + header + b"".join(chunks)


def decode(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if len(blob) < _PREFIX.size:
        raise TruncatedError(f"file is {len(blob)} bytes, shorter than the fixed prefix")
    magic, version, hlen = _PREFIX.unpack_from(blob, 0)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise LayoutError(f"unsupported container version {version}")
    start = _PREFIX.size + hlen
    if start > len(blob):
        raise TruncatedError(f"header length {hlen} runs past end of file")
    try:
        header = json.loads(blob[_PREFIX.size:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise LayoutError(f"unreadable header: {exc}") from exc
    if not isinstance(header, dict) or not isinstance(header.get("tensors"), dict):
        raise LayoutError("header lacks a tensor table")
    payload = memoryview(blob)[start:]
    tensors = {}
    for name, ent in header["tensors"].items():
        try:
            shape = tuple(int(d) for d in ent["shape"])
            off, length = int(ent["offset"]), int(ent["length"])
            dtype = ent["dtype"]
        except (KeyError, TypeError, ValueError) as exc:
            raise LayoutError(f"malformed entry for {name!r}") from exc
        if dtype != "f32":
            raise LayoutError(f"{name}: unsupported dtype {dtype!r}")
        if off < 0 or length < 0 or any(d <= 0 for d in shape):
            raise LayoutError(f"{name}: negative offset/length or empty extent")
        if length != 4 * math.prod(shape):
            raise LayoutError(f"{name}: length {length} does not match shape {shape}")
        if off + length > len(payload):
            raise TruncatedError(f"{name}: bytes [{off}, {off + length}) past payload end {len(payload)}")
        arr = np.frombuffer(payload[off:off + length], dtype="<f4").reshape(shape)
        tensors[name] = arr.astype(np.float32)
    meta = {k: v for k, v in header.items() if k != "tensors"}
    return tensors, meta


def write(path, tensors: dict[str, np.ndarray], meta: dict) -> None:
    Path(path).write_bytes(encode(tensors, meta))


def read(path) -> tuple[dict[str, np.ndarray], dict]:
    return decode(Path(path).read_bytes())
