"""Self-describing binary checkpoint container.

Layout (all integers little-endian)::

    magic   8 bytes  b"NMMCKPT\\0"
    version u32
    hlen    u64      length of the JSON header
    header  hlen     UTF-8 JSON: metadata plus a tensor table
    data             concatenated little-endian float64 tensors

The tensor table lists name, shape and byte offset in declaration order, so
reading and writing preserve order and values exactly.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .data import atomic_write_bytes

MAGIC = b"NMMCKPT\0"
VERSION = 1
_DTYPE = np.dtype("<f8")


class CheckpointError(ValueError):
    pass


def dumps(tensors: dict[str, np.ndarray], meta: dict) -> bytes:
    table, chunks, offset = [], [], 0
    for name, arr in tensors.items():
        a = np.asarray(arr, dtype=_DTYPE, order="C")
        table.append({"name": name, "shape": list(a.shape), "offset": offset})
        b = a.tobytes()
        chunks.append(b)
        offset += len(b)
    header = json.dumps({"meta": meta, "tensors": table}, sort_keys=True,
                        separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<IQ", VERSION, len(header)) + header + b"".join(chunks)


def loads(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if blob[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    if len(blob) < 20:
        raise CheckpointError("truncated checkpoint header")
    version, hlen = struct.unpack("<IQ", blob[8:20])
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(blob[20:20 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from None
    data = blob[20 + hlen:]
    tensors = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape, dtype=np.int64)) * _DTYPE.itemsize
        start = entry["offset"]
        if start + n > len(data):
            raise CheckpointError(f"truncated tensor {entry['name']}")
        tensors[entry["name"]] = np.frombuffer(data[start:start + n], dtype=_DTYPE).reshape(shape).astype(np.float64)
    return tensors, header["meta"]


def save(path: str | Path, tensors: dict[str, np.ndarray], meta: dict) -> None:
    atomic_write_bytes(path, dumps(tensors, meta))


def load(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"{path}: checkpoint not found")
    return loads(path.read_bytes())
