"""Binary container: JSON header followed by raw little-endian arrays.

Layout::

    uint64 (little-endian)   byte length N of the header
    N bytes                  UTF-8 JSON header with a "tensors" list of
                             {"name", "shape", "dtype"} in payload order
    payloads                 each array's bytes, C order, no padding

Used for model checkpoints and prepared window splits. Nothing time- or
host-dependent is written, so identical inputs give identical bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from msgl.errors import PersistenceError

_DTYPES = {"<f8": np.dtype("<f8"), "<i8": np.dtype("<i8")}


def write_container(path: Union[str, Path], header: dict, arrays: Sequence[tuple[str, np.ndarray]]) -> None:
    entries, payloads = [], []
    for name, arr in arrays:
        arr = np.asarray(arr)
        code = "<i8" if np.issubdtype(arr.dtype, np.integer) or arr.dtype == bool else "<f8"
        arr = np.ascontiguousarray(arr, dtype=_DTYPES[code])
        entries.append({"name": name, "shape": list(arr.shape), "dtype": code})
        payloads.append(arr.tobytes())
    head = dict(header)
    head["tensors"] = entries
    blob = json.dumps(head, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for p in payloads:
            fh.write(p)


def read_container(path: Union[str, Path]) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        raw = Path(path).read_bytes()
    except FileNotFoundError as exc:
        raise PersistenceError(f"{path} not found") from exc
    if len(raw) < 8:
        raise PersistenceError(f"{path}: truncated header")
    (n,) = struct.unpack("<Q", raw[:8])
    try:
        header = json.loads(raw[8:8 + n].decode("utf-8"))
        entries = header["tensors"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise PersistenceError(f"{path}: corrupted header") from exc
    arrays: dict[str, np.ndarray] = {}
    offset = 8 + n
    for e in entries:
        try:
            dtype = _DTYPES[e["dtype"]]
            shape = tuple(int(s) for s in e["shape"])
        except (KeyError, TypeError, ValueError) as exc:
            raise PersistenceError(f"{path}: bad tensor entry {e!r}") from exc
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if offset + nbytes > len(raw):
            raise PersistenceError(f"{path}: payload for {e['name']} is truncated")
        arrays[e["name"]] = np.frombuffer(raw, dtype=dtype, count=nbytes // dtype.itemsize, offset=offset).reshape(shape).copy()
        offset += nbytes
    if offset != len(raw):
        raise PersistenceError(f"{path}: {len(raw) - offset} trailing bytes")
    return header, arrays
