"""Binary checkpoint of ordered named tensors.

Layout (all integers little-endian)::

    magic    8 bytes  b"GLTCKPT\\0"
    version  u8       1
    count    u32
    record * count:
        name_len u32, name (UTF-8)
        tag_len  u16, tag  (UTF-8)
        ndim     u32, dims u64 * ndim
        payload  float64 little-endian, C order, prod(dims) values
"""

from __future__ import annotations

import io
import math
import os
import struct
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import ConfigError

MAGIC = b"GLTCKPT\0"
VERSION = 1

Record = tuple[str, str, np.ndarray]


def dumps(records: Iterable[Record]) -> bytes:
    records = list(records)
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<BI", VERSION, len(records)))
    seen = set()
    for name, tag, arr in records:
        if name in seen:
            raise ConfigError(f"duplicate checkpoint record {name!r}")
        seen.add(name)
        arr = np.asarray(arr, dtype="<f8")
        name_b, tag_b = name.encode("utf-8"), tag.encode("utf-8")
        buf.write(struct.pack("<I", len(name_b)) + name_b)
        buf.write(struct.pack("<H", len(tag_b)) + tag_b)
        buf.write(struct.pack(f"<I{arr.ndim}Q", arr.ndim, *arr.shape))
        buf.write(np.ascontiguousarray(arr).tobytes())
    return buf.getvalue()


def loads(data: bytes) -> list[Record]:
    view = memoryview(data)
    if bytes(view[:8]) != MAGIC:
        raise ConfigError("not a checkpoint file (bad magic)")
    version, count = struct.unpack_from("<BI", view, 8)
    if version != VERSION:
        raise ConfigError(f"unsupported checkpoint version {version}")
    pos = 13
    out = []
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", view, pos)
            name = bytes(view[pos + 4 : pos + 4 + n]).decode("utf-8")
            pos += 4 + n
            (n,) = struct.unpack_from("<H", view, pos)
            tag = bytes(view[pos + 2 : pos + 2 + n]).decode("utf-8")
            pos += 2 + n
            (ndim,) = struct.unpack_from("<I", view, pos)
            shape = struct.unpack_from(f"<{ndim}Q", view, pos + 4)
            pos += 4 + 8 * ndim
            size = math.prod(shape)
            arr = np.frombuffer(view, dtype="<f8", count=size, offset=pos).astype(np.float64).reshape(shape)
            pos += 8 * size
            out.append((name, tag, arr))
    except (struct.error, ValueError) as exc:
        raise ConfigError(f"truncated or corrupt checkpoint: {exc}") from None
    if pos != len(data):
        raise ConfigError("trailing bytes after last checkpoint record")
    return out


def save(path: str | os.PathLike, records: Iterable[Record]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(dumps(records))
    return path


def load(path: str | os.PathLike) -> list[Record]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"checkpoint not found: {path}")
    return loads(path.read_bytes())
