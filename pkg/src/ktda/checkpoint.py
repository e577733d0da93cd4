"""Versioned binary checkpoint: named array records with a fixed byte layout.

Layout (little-endian):
  magic "KTDA" | format version u32
  repeated records:
    name length u32 | name bytes (utf-8) | dtype tag u8 | rank u32
    | dims u32[rank] | payload (little-endian, C order)

Record order is preserved, so write(read(file)) reproduces the file
byte-for-byte.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"KTDA"
VERSION = 1

_DTYPES = {0: "<f4", 1: "<f8", 2: "u1", 3: "<u4", 4: "<i8"}
_TAGS = {np.dtype(v): k for k, v in _DTYPES.items()}


class CheckpointError(IOError):
    pass


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


def save(path, records):
    """records: ordered name -> ndarray mapping."""
    chunks = [MAGIC, struct.pack("<I", VERSION)]
    for name, arr in records.items():
        arr = np.ascontiguousarray(arr)
        if arr.dtype not in _TAGS:
            raise ValueError(f"record '{name}': unsupported dtype {arr.dtype}")
        nb = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack("<BI", _TAGS[arr.dtype], arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(chunks))


def load(path):
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 8:
        raise CheckpointTruncatedError(f"{path}: only {len(raw)} bytes")
    if raw[:4] != MAGIC:
        raise CheckpointMagicError(f"{path}: bad magic {raw[:4]!r}, expected {MAGIC!r}")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, expected {VERSION}")
    pos = 8
    records = {}

    def need(n, what):
        nonlocal pos
        if pos + n > len(raw):
            raise CheckpointTruncatedError(
                f"{path}: truncated reading {what}: need {pos + n} bytes, have {len(raw)}"
            )
        out = raw[pos : pos + n]
        pos += n
        return out

    while pos < len(raw):
        (name_len,) = struct.unpack("<I", need(4, "name length"))
        name = need(name_len, "name").decode("utf-8")
        tag, rank = struct.unpack("<BI", need(5, "dtype/rank"))
        if tag not in _DTYPES:
            raise CheckpointError(f"{path}: unknown dtype tag {tag} for '{name}'")
        dims = struct.unpack(f"<{rank}I", need(4 * rank, "dims"))
        dtype = np.dtype(_DTYPES[tag])
        count = int(np.prod(dims)) if rank else 1
        payload = need(count * dtype.itemsize, f"payload of '{name}'")
        records[name] = np.frombuffer(payload, dtype=dtype).reshape(dims).copy()
    return records
