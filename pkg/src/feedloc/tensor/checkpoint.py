"""Binary parameter checkpoints.

Layout (little-endian)::

    magic   8 bytes  b"FLCKPT\\x00\\x01"
    version u32
    meta    u32 length + UTF-8 JSON
    count   u32
    per array: u16 name length, name, u8 ndim, ndim x u32 dims, float32 data
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from ..core import FeedlocError

MAGIC = b"FLCKPT\x00\x01"
VERSION = 1


class CheckpointError(FeedlocError):
    pass


def encode(state: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    parts += [struct.pack("<I", len(meta_bytes)), meta_bytes, struct.pack("<I", len(state))]
    for name, arr in state.items():
        nb = name.encode("utf-8")
        a = np.ascontiguousarray(arr, dtype="<f4")
        parts += [struct.pack("<H", len(nb)), nb, struct.pack("<B", a.ndim),
                  struct.pack(f"<{a.ndim}I", *a.shape), a.tobytes()]
    return b"".join(parts)


def decode(buf: bytes, source: str = "<bytes>") -> tuple[dict[str, np.ndarray], dict]:
    try:
        if buf[:8] != MAGIC:
            raise CheckpointError(f"{source}: not a checkpoint (bad magic)")
        off = 8
        (version,) = struct.unpack_from("<I", buf, off)
        off += 4
        if version != VERSION:
            raise CheckpointError(f"{source}: unsupported checkpoint version {version}")
        (mlen,) = struct.unpack_from("<I", buf, off)
        off += 4
        meta = json.loads(buf[off:off + mlen].decode("utf-8"))
        off += mlen
        (count,) = struct.unpack_from("<I", buf, off)
        off += 4
        state = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off:off + nlen].decode("utf-8")
            off += nlen
            (ndim,) = struct.unpack_from("<B", buf, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", buf, off)
            off += 4 * ndim
            n = int(np.prod(shape)) if ndim else 1
            if off + 4 * n > len(buf):
                raise CheckpointError(f"{source}: truncated array {name!r}")
            state[name] = np.frombuffer(buf, dtype="<f4", count=n, offset=off).reshape(shape).copy()
            off += 4 * n
        if off != len(buf):
            raise CheckpointError(f"{source}: {len(buf) - off} trailing bytes")
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{source}: corrupt checkpoint ({exc})") from exc
    return state, meta


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save(path, state: dict[str, np.ndarray], meta: dict | None = None) -> None:
    atomic_write_bytes(path, encode(state, meta))


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    return decode(Path(path).read_bytes(), str(path))
