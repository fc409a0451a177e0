"""Flat binary tensor files with a JSON header.

Layout: 4-byte magic, little-endian uint64 header length, UTF-8 JSON header,
then every tensor as contiguous little-endian float64 in header order.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"PGT1"


class TensorFileError(ValueError):
    pass


def save_tensors(path: str | Path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    entries = []
    offset = 0
    arrays = []
    for name, value in tensors.items():
        arr = np.ascontiguousarray(value, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.nbytes
        arrays.append(arr)
    header = json.dumps({"meta": meta or {}, "tensors": entries}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for arr in arrays:
            fh.write(arr.tobytes())


def load_tensors(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise TensorFileError(f"{path} is not a tensor file")
    (length,) = struct.unpack("<Q", blob[4:12])
    try:
        header = json.loads(blob[12:12 + length])
    except json.JSONDecodeError as exc:
        raise TensorFileError(f"{path}: corrupt header") from exc
    base = 12 + length
    out = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        start = base + entry["offset"]
        end = start + 8 * count
        if end > len(blob):
            raise TensorFileError(f"{path}: truncated tensor {entry['name']}")
        out[entry["name"]] = np.frombuffer(blob[start:end], dtype="<f8").reshape(entry["shape"]).copy()
    return out, header["meta"]
