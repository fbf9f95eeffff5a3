"""Flat binary container of named 64-bit arrays.

Layout (all integers little-endian)::

    bytes 0..7    magic b"EADAPT01"
    bytes 8..15   uint64 header length H
    next H bytes  UTF-8 JSON header
    rest          concatenated raw array data

The header is ``{"meta": {...}, "arrays": [{"name", "dtype", "shape",
"offset", "nbytes"}, ...]}`` with ``dtype`` either ``"<f8"`` or ``"<i8"`` and
``offset`` counted from the start of the data section. Arrays are stored
C-contiguous.
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"EADAPT01"


class ContainerError(ValueError):
    pass


def save_arrays(path, arrays, meta=None):
    entries, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        dtype = "<i8" if np.issubdtype(arr.dtype, np.integer) or arr.dtype == bool else "<f8"
        data = np.ascontiguousarray(arr, dtype=dtype).tobytes()
        entries.append({"name": name, "dtype": dtype, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    header = json.dumps({"meta": meta or {}, "arrays": entries}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for c in chunks:
            fh.write(c)


def load_arrays(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != MAGIC:
        raise ContainerError(f"{path}: not a parameter container")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    header = json.loads(blob[16:16 + hlen].decode("utf-8"))
    base = 16 + hlen
    arrays = {}
    for e in header["arrays"]:
        start = base + e["offset"]
        raw = blob[start:start + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise ContainerError(f"{path}: truncated array {e['name']}")
        arrays[e["name"]] = np.frombuffer(raw, dtype=e["dtype"]).reshape(e["shape"]).copy()
    return arrays, header["meta"]
