"""Binary checkpoint container.

Layout (all integers little-endian)::

    magic          8 bytes   b"IDLCKPT\\x00"
    version        u32
    descriptor     u32 length + UTF-8 JSON   (model spec, t, metrics snapshot)
    tensor count   u32
    per tensor     u16 name length + UTF-8 name, u32 ndim, ndim x u64 dims,
                   prod(dims) x float64 (IEEE-754 binary64, row-major)
    checksum       32 bytes  SHA-256 of every preceding byte

Version 1 files carry no metrics snapshot in the descriptor; they still load,
with a logged upgrade note.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import struct
from pathlib import Path

import numpy as np

from ..models import ModelSpec, Params
from ..training import Checkpoint

log = logging.getLogger(__name__)

MAGIC = b"IDLCKPT\x00"
FORMAT_VERSION = 2
SUPPORTED_VERSIONS = (1, 2)
_DIGEST = 32


class CheckpointError(ValueError):
    pass


def encode(ckpt: Checkpoint, version: int = FORMAT_VERSION) -> bytes:
    if version not in SUPPORTED_VERSIONS:
        raise CheckpointError(f"cannot write format version {version}")
    desc = {"spec": ckpt.params.spec.to_dict(), "t": ckpt.t}
    if version >= 2:
        desc["metrics"] = ckpt.metrics
    blob = json.dumps(desc, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<I", version), struct.pack("<I", len(blob)), blob,
             struct.pack("<I", len(ckpt.params.tensors))]
    for name in sorted(ckpt.params.tensors):
        arr = np.ascontiguousarray(ckpt.params.tensors[name], dtype="<f8")
        nb = name.encode()
        parts += [struct.pack("<H", len(nb)), nb, struct.pack("<I", arr.ndim),
                  struct.pack(f"<{arr.ndim}Q", *arr.shape), arr.tobytes()]
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def decode(raw: bytes, expected_spec: ModelSpec | None = None) -> Checkpoint:
    if len(raw) < len(MAGIC) + 4 + _DIGEST:
        raise CheckpointError("file too short")
    body, digest = raw[:-_DIGEST], raw[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checksum mismatch; file is corrupt")
    if body[:8] != MAGIC:
        raise CheckpointError("bad magic; not a checkpoint file")
    (version,) = struct.unpack_from("<I", body, 8)
    if version not in SUPPORTED_VERSIONS:
        raise CheckpointError(f"unsupported format version {version}")
    pos = 12
    try:
        (n,) = struct.unpack_from("<I", body, pos)
        pos += 4
        desc = json.loads(body[pos:pos + n].decode())
        pos += n
        (count,) = struct.unpack_from("<I", body, pos)
        pos += 4
        tensors = {}
        for _ in range(count):
            (ln,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos:pos + ln].decode()
            pos += ln
            (ndim,) = struct.unpack_from("<I", body, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}Q", body, pos)
            pos += 8 * ndim
            size = int(np.prod(shape)) * 8
            if pos + size > len(body):
                raise CheckpointError(f"tensor {name!r} runs past end of file")
            tensors[name] = np.frombuffer(body, dtype="<f8", count=size // 8, offset=pos).reshape(shape).astype(np.float64)
            pos += size
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"malformed checkpoint: {exc}") from exc
    if pos != len(body):
        raise CheckpointError("trailing bytes after tensors")
    spec = ModelSpec.from_dict(desc["spec"])
    if expected_spec is not None and spec != expected_spec:
        raise CheckpointError(f"checkpoint spec {spec} does not match expected {expected_spec}")
    if version < FORMAT_VERSION:
        log.info("checkpoint format v%d upgraded to v%d on load (metrics snapshot empty)", version, FORMAT_VERSION)
    return Checkpoint(int(desc["t"]), Params(spec, tensors), desc.get("metrics", {}))


def save_checkpoint(path, ckpt: Checkpoint, version: int = FORMAT_VERSION) -> Path:
    """Write atomically (temp file + rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode(ckpt, version))
    os.replace(tmp, path)
    return path


def load_checkpoint(path, expected_spec: ModelSpec | None = None) -> Checkpoint:
    return decode(Path(path).read_bytes(), expected_spec)
