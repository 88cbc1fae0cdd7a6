"""Versioned binary record container used for datasets and checkpoints.

Layout (all integers little-endian)::

    bytes 0-3    magic  b"DURA"
    bytes 4-5    kind   b"DS" (dataset) or b"CK" (checkpoint)
    bytes 6-7    format version, uint16
    bytes 8-11   header length H, uint32
    H bytes      UTF-8 JSON header, keys sorted:
                   {"meta": {...}, "arrays": [{"name", "dtype", "shape"}, ...]}
    payload      each array's raw little-endian bytes, C order, in header order

Floats in the header are written with ``repr`` precision by ``json`` and the
arrays are copied byte for byte, so a write/read round trip is bit-exact and
writing the same content twice produces identical files.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .exceptions import FormatError

MAGIC = b"DURA"
VERSION = 1


def write_record(path, kind: bytes, meta: dict, arrays: dict) -> Path:
    path = Path(path)
    manifest = []
    blobs = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        if arr.dtype.kind in "iuf":
            arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        manifest.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape)})
        blobs.append(arr.tobytes(order="C"))
    header = json.dumps({"meta": meta, "arrays": manifest}, sort_keys=True).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC + kind + struct.pack("<HI", VERSION, len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)
    return path


def read_record(path, kind: bytes):
    """Return ``(meta, arrays)`` from a record written by :func:`write_record`."""
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != MAGIC:
        raise FormatError(f"{path}: not a dura record")
    if data[4:6] != kind:
        raise FormatError(f"{path}: expected kind {kind!r}, found {data[4:6]!r}")
    version, hlen = struct.unpack("<HI", data[6:12])
    if version != VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")
    header = json.loads(data[12 : 12 + hlen].decode("utf-8"))
    offset = 12 + hlen
    arrays = {}
    for entry in header["arrays"]:
        dt = np.dtype(entry["dtype"])
        shape = tuple(entry["shape"])
        nbytes = dt.itemsize * int(np.prod(shape, dtype=np.int64))
        if offset + nbytes > len(data):
            raise FormatError(f"{path}: truncated payload for {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(data, dtype=dt, count=nbytes // dt.itemsize, offset=offset).reshape(shape).copy()
        offset += nbytes
    if offset != len(data):
        raise FormatError(f"{path}: trailing bytes after payload")
    return header["meta"], arrays
