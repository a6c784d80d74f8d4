"""Named-tensor blob files for weights and golden tensors.

Byte layout (little-endian throughout):

    magic   4 bytes  b"MVLN"
    version u32      currently 1
    count   u32      number of entries
    entry   name_len u16, name UTF-8, rank u8, dims u32 x rank,
            payload float32 x prod(dims)

Entries keep their insertion order, so save -> load -> save is
byte-identical.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from ..errors import DuplicateName, MalformedFile

MAGIC = b"MVLN"
VERSION = 1


def save_blob(store: dict[str, np.ndarray], path) -> None:
    parts = [MAGIC, struct.pack("<II", VERSION, len(store))]
    for name, arr in store.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_blob(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != MAGIC:
        raise MalformedFile(f"{path}: not a tensor blob (bad magic)")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise MalformedFile(f"{path}: unsupported blob version {version}")
    store: dict[str, np.ndarray] = {}
    off = 12
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", raw, off)
            off += 2
            name = raw[off:off + name_len].decode("utf-8")
            if len(raw) < off + name_len:
                raise MalformedFile(f"{path}: truncated entry name")
            off += name_len
            (rank,) = struct.unpack_from("<B", raw, off)
            off += 1
            dims = struct.unpack_from(f"<{rank}I", raw, off)
            off += 4 * rank
            n = int(np.prod(dims, dtype=np.int64)) if rank else 1
            end = off + 4 * n
            if end > len(raw):
                raise MalformedFile(f"{path}: truncated payload for {name!r}")
            arr = np.frombuffer(raw[off:end], dtype="<f4").reshape(dims)
            off = end
            if name in store:
                raise DuplicateName(f"{path}: duplicate entry {name!r}")
            store[name] = arr.copy()
    except struct.error as exc:
        raise MalformedFile(f"{path}: truncated blob") from exc
    if off != len(raw):
        raise MalformedFile(f"{path}: {len(raw) - off} trailing bytes")
    return store
