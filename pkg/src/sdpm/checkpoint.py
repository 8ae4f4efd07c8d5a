"""Checkpoint container.

Layout::

    8 bytes   magic  b"SDPMCKPT"
    uint32    format version (little-endian)
    uint64    header length in bytes
    header    UTF-8 JSON: config echo, tool version, state scalars, and a
              manifest of arrays {name, shape, offset, nbytes}
    payload   raw little-endian float32 arrays in manifest order

Offsets are relative to the start of the payload.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import CheckpointError, CheckpointVersionError, CorruptCheckpointError

MAGIC = b"SDPMCKPT"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


def write_container(path, arrays: dict[str, np.ndarray], header: dict) -> Path:
    manifest, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype="<f4")
        raw = a.tobytes()
        manifest.append({"name": name, "shape": list(a.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    head = json.dumps({**header, "manifest": manifest}, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(_PREFIX.pack(MAGIC, FORMAT_VERSION, len(head)))
            f.write(head)
            for c in chunks:
                f.write(c)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def read_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Parse and validate a whole container before returning anything."""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if len(raw) < _PREFIX.size:
        raise CorruptCheckpointError(f"{path}: file too short for header")
    magic, version, hlen = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CorruptCheckpointError(f"{path}: bad magic bytes")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    start = _PREFIX.size + hlen
    if len(raw) < start:
        raise CorruptCheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[_PREFIX.size:start].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpointError(f"{path}: unreadable header") from exc
    payload = memoryview(raw)[start:]
    arrays = {}
    for entry in header.get("manifest", []):
        off, n = entry["offset"], entry["nbytes"]
        expected = int(np.prod(entry["shape"], dtype=np.int64)) * 4
        if n != expected or off + n > len(payload):
            raise CorruptCheckpointError(f"{path}: array {entry['name']} truncated or inconsistent")
        arrays[entry["name"]] = (
            np.frombuffer(payload[off:off + n], dtype="<f4").reshape(entry["shape"]).astype(np.float32)
        )
    total = sum(e["nbytes"] for e in header.get("manifest", []))
    if total != len(payload):
        raise CorruptCheckpointError(f"{path}: payload length {len(payload)} != manifest total {total}")
    return header, arrays
