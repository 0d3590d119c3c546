"""Flat binary weight container.

Layout (all integers little-endian)::

    b"XDRW" | version:u8 | count:u32
    per tensor: name_len:u32 | name:utf-8 | rank:u32 | extents:u32*rank | data:f64le*prod(extents)

An optional entry named ``__meta__`` stores a UTF-8 JSON document as a rank-1
array of byte values, so metadata rides inside the same format.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"XDRW"
VERSION = 1
META_KEY = "__meta__"


class WeightFileError(ValueError):
    pass


def encode_weights(tensors: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    items = list(tensors.items())
    if meta is not None:
        raw = json.dumps(meta, sort_keys=True).encode("utf-8")
        items.append((META_KEY, np.frombuffer(raw, dtype=np.uint8).astype(np.float64)))
    out = [MAGIC, struct.pack("<BI", VERSION, len(items))]
    for name, arr in items:
        arr = np.asarray(arr, dtype=np.float64)
        nb = name.encode("utf-8")
        out.append(struct.pack("<I", len(nb)))
        out.append(nb)
        out.append(struct.pack("<I", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.astype("<f8").tobytes(order="C"))
    return b"".join(out)


def decode_weights(buf: bytes) -> tuple[dict[str, np.ndarray], dict | None]:
    if buf[:4] != MAGIC:
        raise WeightFileError("bad magic; not an XDRW weight file")
    version, count = struct.unpack_from("<BI", buf, 4)
    if version != VERSION:
        raise WeightFileError(f"unsupported weight file version {version}")
    off = 9
    tensors: dict[str, np.ndarray] = {}
    meta = None
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", buf, off)
            off += 4
            name = buf[off:off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<I", buf, off)
            off += 4
            shape = struct.unpack_from(f"<{rank}I", buf, off)
            off += 4 * rank
            n = int(np.prod(shape)) if rank else 1
            if off + 8 * n > len(buf):
                raise WeightFileError(f"truncated data for tensor {name!r}")
            arr = np.frombuffer(buf, dtype="<f8", count=n, offset=off).astype(np.float64).reshape(shape)
            off += 8 * n
            if name == META_KEY:
                meta = json.loads(arr.astype(np.uint8).tobytes().decode("utf-8"))
            else:
                tensors[name] = arr
    except struct.error as e:
        raise WeightFileError(f"truncated weight file: {e}") from e
    if off != len(buf):
        raise WeightFileError(f"{len(buf) - off} trailing bytes after {count} tensors")
    return tensors, meta


def save_weights(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    Path(path).write_bytes(encode_weights(tensors, meta))


def load_weights(path) -> tuple[dict[str, np.ndarray], dict | None]:
    return decode_weights(Path(path).read_bytes())
