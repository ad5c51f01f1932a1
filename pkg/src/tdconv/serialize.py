"""Checkpoint container format.

A checkpoint is a single file: one UTF-8 JSON header line describing the
metadata and an ordered list of (name, dtype, shape) entries, followed by the
raw little-endian array bytes in declaration order.
"""

from __future__ import annotations

import json

import numpy as np

MAGIC = "tdconv-checkpoint-v1"

_DTYPES = {"float32": "<f4", "float64": "<f8", "int64": "<i8"}


def save_arrays(path, meta, arrays):
    """Write ``arrays`` (ordered name -> ndarray dict) with a metadata header."""
    entries = []
    for name, arr in arrays.items():
        if arr.dtype.name not in _DTYPES:
            raise ValueError(f"unsupported dtype {arr.dtype.name} for entry {name!r}")
        entries.append([name, arr.dtype.name, list(arr.shape)])
    header = {"magic": MAGIC, "meta": meta, "entries": entries}
    with open(path, "wb") as f:
        f.write(json.dumps(header).encode("utf-8") + b"\n")
        for arr in arrays.values():
            f.write(np.ascontiguousarray(arr, dtype=_DTYPES[arr.dtype.name]).tobytes())


def load_arrays(path):
    """Read a checkpoint; returns (meta, ordered name -> ndarray dict)."""
    with open(path, "rb") as f:
        header = json.loads(f.readline().decode("utf-8"))
        if header.get("magic") != MAGIC:
            raise ValueError(f"{path}: not a tdconv checkpoint")
        arrays = {}
        for name, dtype, shape in header["entries"]:
            count = int(np.prod(shape)) if shape else 1
            buf = f.read(count * np.dtype(_DTYPES[dtype]).itemsize)
            arrays[name] = np.frombuffer(buf, dtype=_DTYPES[dtype]).reshape(shape).astype(dtype)
    return header["meta"], arrays
