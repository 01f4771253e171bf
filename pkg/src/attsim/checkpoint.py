"""Binary checkpoint format.

Layout (little-endian)::

    b"FSAM"  u32 version  32-byte config digest
    repeated: u16 name length, name (utf-8), u8 rank, u32 dims[rank], f32 data
"""

from __future__ import annotations

import hashlib
import json
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

MAGIC = b"FSAM"
VERSION = 1


class CheckpointError(ValueError):
    pass


def config_digest(config: dict) -> bytes:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).digest()


def dumps(arrays: dict, digest: bytes) -> bytes:
    if len(digest) != 32:
        raise CheckpointError("config digest must be 32 bytes")
    parts = [MAGIC, struct.pack("<I", VERSION), digest]
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype="<f4")
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def loads(blob: bytes) -> tuple[bytes, "OrderedDict[str, np.ndarray]"]:
    if blob[:4] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    digest = blob[8:40]
    pos, arrays = 40, OrderedDict()
    try:
        while pos < len(blob):
            (n,) = struct.unpack_from("<H", blob, pos)
            name = blob[pos + 2 : pos + 2 + n].decode()
            pos += 2 + n
            (rank,) = struct.unpack_from("<B", blob, pos)
            dims = struct.unpack_from(f"<{rank}I", blob, pos + 1)
            pos += 1 + 4 * rank
            count = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(blob, dtype="<f4", count=count, offset=pos).reshape(dims)
            arrays[name] = arr.astype(np.float32)
            pos += 4 * count
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"truncated or corrupt checkpoint ({exc})") from None
    return digest, arrays


def save(path, arrays: dict, digest: bytes) -> None:
    Path(path).write_bytes(dumps(arrays, digest))


def load(path) -> tuple[bytes, "OrderedDict[str, np.ndarray]"]:
    return loads(Path(path).read_bytes())
