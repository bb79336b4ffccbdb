"""Versioned binary checkpoint container.

Byte layout (all integers little-endian):

    magic     8 bytes   b"DLVLCKPT"
    version   uint32    format version (currently 1)
    hdr_len   uint32    length of the UTF-8 JSON header
    header    hdr_len   JSON: model config, step, rng state, anything scalar
    count     uint32    number of records
    records   repeated:
        name_len  uint16
        name      name_len bytes UTF-8
        ndim      uint8
        dims      ndim * uint32
        data      prod(dims) * float32 little-endian

Records are written sorted by name and the header JSON uses sorted keys with
fixed separators, so serialization is idempotent: save -> load -> save
produces byte-identical files.
"""

from __future__ import annotations

import json
import struct
from typing import Any

import numpy as np

from .errors import ParseError

MAGIC = b"DLVLCKPT"
FORMAT_VERSION = 1


def save(path, header: dict[str, Any], arrays: dict[str, np.ndarray]):
    header = dict(header)
    header["format_version"] = FORMAT_VERSION
    hdr = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", FORMAT_VERSION, len(hdr)))
        f.write(hdr)
        f.write(struct.pack("<I", len(arrays)))
        for name in sorted(arrays):
            arr = np.ascontiguousarray(arrays[name], dtype="<f4")
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load(path) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        blob = f.read()
    off = 0

    def take(n, what):
        nonlocal off
        if off + n > len(blob):
            raise ParseError(f"checkpoint truncated while reading {what}", offset=off)
        chunk = blob[off:off + n]
        off += n
        return chunk

    if take(8, "magic") != MAGIC:
        raise ParseError("not a checkpoint file (bad magic)", offset=0)
    version, hdr_len = struct.unpack("<II", take(8, "version/header length"))
    if version != FORMAT_VERSION:
        raise ParseError(f"unsupported checkpoint version {version}", offset=8)
    try:
        header = json.loads(take(hdr_len, "header").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ParseError(f"bad header JSON: {e}", offset=16) from None
    (count,) = struct.unpack("<I", take(4, "record count"))
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        name = take(name_len, "name").decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1, "ndim"))
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim, "dims"))
        n = int(np.prod(dims)) if ndim else 1
        data = np.frombuffer(take(4 * n, f"data of {name}"), dtype="<f4")
        arrays[name] = data.reshape(dims).copy()
    if off != len(blob):
        raise ParseError(f"{len(blob) - off} trailing bytes after last record", offset=off)
    return header, arrays
