"""Binary checkpoint format.

``b"M2TR"``, u32 version, then two length-prefixed UTF-8 JSON blobs (the
canonical config and a metadata record), a u32 tensor count, and per tensor:
u32 name length, UTF-8 name, u32 rank, rank x u32 dims, f32 payload.
Integers and floats are little-endian.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from m2tr.config import Config
from m2tr.errors import DataError

MAGIC = b"M2TR"
VERSION = 1


@dataclass
class Checkpoint:
    config: Config
    tensors: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    def params(self, prefix: str = "param/") -> dict[str, np.ndarray]:
        return {k[len(prefix):]: v for k, v in self.tensors.items() if k.startswith(prefix)}


def _blob(text: str) -> bytes:
    raw = text.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def encode(ck: Checkpoint) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION), _blob(ck.config.canonical_json()),
             _blob(json.dumps(ck.meta, sort_keys=True, separators=(",", ":"))),
             struct.pack("<I", len(ck.tensors))]
    for name in sorted(ck.tensors):
        arr = np.ascontiguousarray(np.asarray(ck.tensors[name], dtype="<f4"))
        parts.append(_blob(name))
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode(blob: bytes) -> Checkpoint:
    if blob[:4] != MAGIC:
        raise DataError("not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise DataError(f"checkpoint version {version} is not supported (expected {VERSION})")
    pos = 8

    def read_text() -> str:
        nonlocal pos
        (n,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        text = blob[pos:pos + n].decode("utf-8")
        pos += n
        return text

    try:
        config = Config.from_dict(json.loads(read_text()))
        meta = json.loads(read_text())
        (count,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        tensors = {}
        for _ in range(count):
            name = read_text()
            (rank,) = struct.unpack_from("<I", blob, pos)
            dims = struct.unpack_from(f"<{rank}I", blob, pos + 4)
            pos += 4 + 4 * rank
            n = int(np.prod(dims)) if rank else 1
            tensors[name] = np.frombuffer(blob, dtype="<f4", count=n, offset=pos).reshape(dims).astype(np.float32)
            pos += 4 * n
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise DataError(f"truncated or corrupt checkpoint: {exc}") from exc
    if pos != len(blob):
        raise DataError("trailing bytes after checkpoint payload")
    return Checkpoint(config, tensors, meta)


def save(path, ck: Checkpoint) -> None:
    Path(path).write_bytes(encode(ck))


def load(path) -> Checkpoint:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode(blob)


def from_model(model, config: Config, meta: dict | None = None, optimizer=None) -> Checkpoint:
    tensors = {f"param/{k}": v for k, v in model.state_dict().items()}
    if optimizer is not None:
        tensors.update(optimizer.state_tensors())
    return Checkpoint(config, tensors, dict(meta or {}))


def load_model(path_or_ck):
    """Rebuild an :class:`M2TRModel` from a checkpoint path or object."""
    from m2tr.network import M2TRModel

    ck = path_or_ck if isinstance(path_or_ck, Checkpoint) else load(path_or_ck)
    model = M2TRModel(ck.config)
    try:
        model.load_state_dict(ck.params())
    except (KeyError, ValueError) as exc:
        raise DataError(f"checkpoint does not match its config: {exc}") from exc
    return model, ck
