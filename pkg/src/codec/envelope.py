"""Binary artifact envelope shared by models, datasets, matrices and checkpoints.

Layout (all integers little-endian)::

    b"CDEC" | version u32 | header length u64 | header (UTF-8 JSON)
    | float64 blocks in header order | CRC32 u32 of every preceding byte

The header lists the blocks as ``{"name": ..., "shape": [...]}`` entries.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"CDEC"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<4sIQ")


class EnvelopeError(ValueError):
    """Base class for unreadable artifact files."""


class ChecksumError(EnvelopeError):
    pass


class VersionError(EnvelopeError):
    pass


class TruncatedError(EnvelopeError):
    pass


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")


def encode(header: dict, blocks: list[tuple[str, np.ndarray]]) -> bytes:
    header = dict(header)
    header["blocks"] = [{"name": name, "shape": list(np.shape(arr))} for name, arr in blocks]
    head = canonical_json(header)
    parts = [_PREFIX.pack(MAGIC, FORMAT_VERSION, len(head)), head]
    for _, arr in blocks:
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode(data: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(data) < _PREFIX.size + 4:
        raise TruncatedError("file too short for an artifact envelope")
    magic, version, head_len = _PREFIX.unpack_from(data, 0)
    if magic != MAGIC:
        raise EnvelopeError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise VersionError(f"format version {version} is not supported (expected {FORMAT_VERSION})")
    start = _PREFIX.size
    if len(data) < start + head_len + 4:
        raise TruncatedError("header extends past end of file")
    crc_ok = zlib.crc32(data[:-4]) == struct.unpack("<I", data[-4:])[0]
    try:
        header = json.loads(data[start:start + head_len].decode("utf-8"))
        sizes = [int(np.prod(b["shape"], dtype=np.int64)) for b in header.get("blocks", [])]
    except (UnicodeDecodeError, ValueError, TypeError, KeyError, AttributeError):
        # a damaged header is reported as a checksum failure when the CRC disagrees
        if not crc_ok:
            raise ChecksumError("CRC32 mismatch") from None
        raise EnvelopeError("header is not a valid block listing") from None
    offset = start + head_len
    expected = offset + 8 * sum(sizes) + 4
    if len(data) < expected:
        raise TruncatedError(f"expected {expected} bytes, found {len(data)}")
    if len(data) > expected:
        raise EnvelopeError(f"{len(data) - expected} trailing bytes after checksum")
    if not crc_ok:
        raise ChecksumError("CRC32 mismatch")
    blocks = {}
    for spec, size in zip(header["blocks"], sizes):
        arr = np.frombuffer(data, dtype="<f8", count=size, offset=offset).reshape(spec["shape"])
        blocks[spec["name"]] = arr.astype(np.float64)
        offset += 8 * size
    return header, blocks


def write(path, header: dict, blocks: list[tuple[str, np.ndarray]]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(header, blocks))
    tmp.replace(path)
    return path


def read(path) -> tuple[dict, dict[str, np.ndarray]]:
    return decode(Path(path).read_bytes())
