"""Binary parameter files.

Layout (all integers little-endian)::

    magic      4 bytes  b"RCPT"
    version    u32      1
    count      u32      number of arrays
    meta_len   u32      length of the JSON metadata blob
    meta       meta_len bytes, UTF-8 JSON object
    table      count x (name_len u16, name bytes, ndim u32, ndim x u64 dims)
    data       each array in table order, row-major little-endian float64

The same format holds backbone weights and plug-in weights.
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"RCPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_arrays(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    names = sorted(arrays)
    blob = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<III", VERSION, len(names), len(blob)), blob]
    for name in names:
        arr = np.asarray(arrays[name])
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
    for name in names:
        parts.append(np.ascontiguousarray(arrays[name], dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_arrays(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a parameter file (bad magic)")
    try:
        version, count, meta_len = struct.unpack_from("<III", buf, 4)
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        pos = 16
        meta = json.loads(buf[pos : pos + meta_len].decode("utf-8"))
        pos += meta_len
        table = []
        for _ in range(count):
            (n,) = struct.unpack_from("<H", buf, pos)
            name = buf[pos + 2 : pos + 2 + n].decode("utf-8")
            pos += 2 + n
            (ndim,) = struct.unpack_from("<I", buf, pos)
            shape = struct.unpack_from(f"<{ndim}Q", buf, pos + 4)
            pos += 4 + 8 * ndim
            table.append((name, shape))
        out = {}
        for name, shape in table:
            size = int(np.prod(shape, dtype=np.int64))
            if pos + 8 * size > len(buf):
                raise CheckpointError(f"{path}: truncated data for {name}")
            out[name] = np.frombuffer(buf, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
            pos += 8 * size
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt header ({e})") from e
    if pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - pos} trailing bytes")
    return out, meta
