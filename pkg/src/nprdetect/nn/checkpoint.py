"""Binary checkpoint format.

Layout (little-endian)::

    b"NPRM"
    u32 len, utf-8 descriptor   "<architecture>|key=value|..."
    u32 tensor count (parameters, then input-normalization buffers)
    per tensor: u16 len, utf-8 name, u8 ndim, u32 dims[ndim], f32 payload
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

from .model import ARCHITECTURE, DetectorModel

MAGIC = b"NPRM"


class CheckpointError(ValueError):
    """Malformed checkpoint or architecture mismatch."""


def encode_descriptor(meta: dict) -> str:
    parts = [ARCHITECTURE] + [f"{k}={meta[k]}" for k in sorted(meta)]
    return "|".join(parts)


def decode_descriptor(text: str):
    arch, *rest = text.split("|")
    meta = {}
    for item in rest:
        key, _, value = item.partition("=")
        meta[key] = value
    return arch, meta


def dumps_checkpoint(model: DetectorModel, meta: dict | None = None) -> bytes:
    desc = encode_descriptor(meta or {}).encode("utf-8")
    chunks = [MAGIC, struct.pack("<I", len(desc)), desc]
    params = model.state()
    chunks.append(struct.pack("<I", len(params)))
    for name, arr in params.items():
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(chunks)


def loads_checkpoint(buf: bytes):
    """Return ``(model, meta)``; raises :class:`CheckpointError` on any defect."""
    try:
        if buf[:4] != MAGIC:
            raise CheckpointError(f"bad checkpoint magic {buf[:4]!r}")
        pos = 4
        (dlen,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        arch, meta = decode_descriptor(buf[pos:pos + dlen].decode("utf-8"))
        pos += dlen
        if arch != ARCHITECTURE:
            raise CheckpointError(f"architecture mismatch: {arch!r}")
        (count,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        params = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            dims = struct.unpack_from(f"<{ndim}I", buf, pos)
            pos += 4 * ndim
            size = int(np.prod(dims)) if dims else 1
            if pos + 4 * size > len(buf):
                raise CheckpointError(f"truncated payload for {name}")
            params[name] = np.frombuffer(buf, dtype="<f4", count=size, offset=pos).reshape(dims)
            pos += 4 * size
        if pos != len(buf):
            raise CheckpointError("trailing bytes after last parameter")
    except (struct.error, UnicodeDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from None
    model = DetectorModel()
    try:
        model.load_state(params)
    except ValueError as exc:
        raise CheckpointError(str(exc)) from None
    return model, meta


def save_checkpoint(path, model: DetectorModel, meta: dict | None = None) -> None:
    Path(path).write_bytes(dumps_checkpoint(model, meta))


def load_checkpoint(path):
    return loads_checkpoint(Path(path).read_bytes())


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
