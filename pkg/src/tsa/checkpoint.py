"""Binary checkpoint container.

Layout: the 8-byte magic ``TSACKPT1``, a little-endian uint64 manifest
length, the UTF-8 JSON manifest, then raw little-endian float32 payloads
packed densely in manifest order. Offsets in the manifest are relative to
the start of the payload.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"TSACKPT1"
_LEN = struct.Struct("<Q")


class CheckpointError(Exception):
    pass


def write_container(path, config: dict, tensors: list) -> None:
    """``tensors`` is an ordered list of ``(name, array)`` pairs."""
    table = []
    blobs = []
    offset = 0
    for name, arr in tensors:
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        table.append({"name": name, "shape": list(np.shape(arr)), "offset": offset})
        blobs.append(data)
        offset += len(data)
    manifest = json.dumps({"config": config, "tensors": table}, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(_LEN.pack(len(manifest)))
        f.write(manifest)
        for b in blobs:
            f.write(b)


def read_container(path) -> tuple:
    """Return ``(config_dict, {name: float32 array})`` in manifest order."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:8]!r}, expected {MAGIC!r}")
    if len(raw) < 16:
        raise CheckpointError(f"{path}: truncated header")
    (n,) = _LEN.unpack_from(raw, 8)
    if 16 + n > len(raw):
        raise CheckpointError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(raw[16 : 16 + n].decode())
        config = manifest["config"]
        table = manifest["tensors"]
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: unreadable manifest ({exc})") from exc
    payload = memoryview(raw)[16 + n :]
    tensors = {}
    for entry in table:
        name = entry["name"]
        shape = tuple(int(s) for s in entry["shape"])
        start = int(entry["offset"])
        count = int(np.prod(shape, dtype=np.int64))
        end = start + 4 * count
        if end > len(payload):
            raise CheckpointError(
                f"{path}: tensor '{name}' is missing or truncated "
                f"(needs bytes {start}..{end}, payload has {len(payload)})"
            )
        arr = np.frombuffer(payload[start:end], dtype="<f4").reshape(shape)
        tensors[name] = arr.astype(np.float32)
    return config, tensors
