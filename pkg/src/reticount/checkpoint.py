"""Flat binary checkpoint container.

Layout (all integers little-endian)::

    magic      4 bytes   b"RTCK"
    version    uint32    currently 1
    count      uint32    number of entries
    entries    count times:
        name_len  uint16
        name      utf-8 bytes
        dtype     uint8     0=float32 1=float64 2=int64 3=uint8
        ndim      uint8
        shape     ndim x uint32
        data      prod(shape) little-endian values, row-major

Names are free-form; the trainer uses ``param/<layer>``, ``bn/<layer>/mean``,
``adam/m/<layer>`` and stores JSON metadata as uint8 entries under ``meta/``.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"RTCK"
VERSION = 1

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8"), 3: np.dtype("u1")}


class CheckpointError(ValueError):
    pass


def _code_for(arr: np.ndarray) -> int:
    for code, dt in _DTYPES.items():
        if arr.dtype.kind == dt.kind and arr.dtype.itemsize == dt.itemsize:
            return code
    raise CheckpointError(f"unsupported dtype {arr.dtype}")


def dumps(entries: Mapping[str, np.ndarray]) -> bytes:
    chunks = [MAGIC, struct.pack("<II", VERSION, len(entries))]
    for name, value in entries.items():
        arr = np.asarray(value)
        code = _code_for(arr)
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
        bname = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(bname)))
        chunks.append(bname)
        chunks.append(struct.pack("<BB", code, arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(raw)
    return b"".join(chunks)


def loads(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off = 12
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", blob, off)
            off += 2
            name = blob[off : off + nlen].decode("utf-8")
            off += nlen
            code, ndim = struct.unpack_from("<BB", blob, off)
            off += 2
            shape = struct.unpack_from(f"<{ndim}I", blob, off)
            off += 4 * ndim
            dt = _DTYPES[code]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            if off + nbytes > len(blob):
                raise CheckpointError(f"truncated data for entry {name!r}")
            arr = np.frombuffer(blob, dtype=dt, count=nbytes // dt.itemsize, offset=off).reshape(shape)
            out[name] = arr.astype(dt.newbyteorder("="), copy=True)
            off += nbytes
    except (struct.error, KeyError) as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from exc
    return out


def save(path: str | Path, entries: Mapping[str, np.ndarray]) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(dumps(entries))
    tmp.replace(path)


def load(path: str | Path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())


def encode_json(obj) -> np.ndarray:
    return np.frombuffer(json.dumps(obj, sort_keys=True).encode("utf-8"), dtype=np.uint8).copy()


def decode_json(arr: np.ndarray):
    return json.loads(bytes(np.asarray(arr, dtype=np.uint8)).decode("utf-8"))
