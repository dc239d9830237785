"""
Binary checkpoint container.

Layout (all integers little-endian)::

    b"SGNF"                 4-byte magic
    u32 version             currently 1
    u64 header_len          byte length of the JSON header
    header                  UTF-8 JSON: {"meta": {...}, "tensors": {name: {dtype, shape, offset, nbytes}}}
    zero padding            up to the next multiple of 64
    payload                 raw tensor bytes; each tensor starts on a 64-byte boundary,
                            offsets are relative to the start of the payload;
                            the file ends right after the last tensor

Tensors are stored as ``<f4`` (float32) or ``<f8`` (float64) so a round trip
is bit-exact. Files are written to a temporary sibling and renamed into place.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import FormatError, VersionUnsupportedError

MAGIC = b"SGNF"
VERSION = 1
ALIGN = 64
_DTYPES = {"f4": np.dtype("<f4"), "f8": np.dtype("<f8")}


def _align(n: int) -> int:
    return (n + ALIGN - 1) // ALIGN * ALIGN


def write_checkpoint(path, tensors: Mapping[str, np.ndarray], meta: dict) -> None:
    path = Path(path)
    directory = {}
    offset = 0
    end = 0
    blobs = []
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype == np.float32:
            code = "f4"
        elif arr.dtype == np.float64:
            code = "f8"
        else:
            raise FormatError(f"tensor {name!r}: unsupported dtype {arr.dtype}")
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
        directory[name] = {"dtype": code, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
        blobs.append((offset, raw))
        end = offset + len(raw)
        offset = _align(end)
    header = json.dumps({"meta": meta, "tensors": directory}, sort_keys=True).encode("utf-8")
    prefix = MAGIC + struct.pack("<IQ", VERSION, len(header)) + header
    payload_start = _align(len(prefix))

    buf = bytearray(payload_start + end)
    buf[: len(prefix)] = prefix
    for off, raw in blobs:
        buf[payload_start + off: payload_start + off + len(raw)] = raw

    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(bytes(buf))
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Return ``(meta, tensors)``; raises FormatError on any structural problem."""
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic or too short)")
    version, header_len = struct.unpack_from("<IQ", raw, 4)
    if version != VERSION:
        raise VersionUnsupportedError(f"{path}: checkpoint version {version} unsupported (expected {VERSION})")
    if 16 + header_len > len(raw):
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(raw[16:16 + header_len].decode("utf-8"))
        meta, directory = header["meta"], header["tensors"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise FormatError(f"{path}: malformed header ({exc})") from None

    payload_start = _align(16 + header_len)
    tensors = {}
    for name, entry in directory.items():
        try:
            dt = _DTYPES[entry["dtype"]]
            shape = tuple(int(s) for s in entry["shape"])
            start = payload_start + int(entry["offset"])
            nbytes = int(entry["nbytes"])
        except (KeyError, TypeError, ValueError):
            raise FormatError(f"{path}: bad directory entry for {name!r}") from None
        if nbytes != int(np.prod(shape, dtype=np.int64)) * dt.itemsize:
            raise FormatError(f"{path}: size of {name!r} inconsistent with its shape")
        if start + nbytes > len(raw):
            raise FormatError(f"{path}: truncated payload for {name!r}")
        arr = np.frombuffer(raw, dtype=dt, count=nbytes // dt.itemsize, offset=start).reshape(shape)
        tensors[name] = arr.astype(dt.newbyteorder("="), copy=True)
    return meta, tensors
