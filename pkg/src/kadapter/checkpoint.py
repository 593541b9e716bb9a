"""Named-tensor checkpoint archive.

Layout (all integers little-endian)::

    b"KADP"                   magic
    u32  version              currently 1
    u32  header_len
    header_len bytes          UTF-8 JSON: {"metadata": {...},
                              "entries": [[name, [dims...], offset], ...]}
    u64  payload_len
    payload_len bytes         float32 little-endian values, entries back to back

Entries are written in sorted name order and the JSON is canonical
(sorted keys, compact separators), so saving the same model twice yields the
same bytes.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .errors import (BadMagicError, CorruptCheckpointError, TruncatedCheckpointError,
                     UnsupportedVersionError)
from .ndgrad import Tensor

MAGIC = b"KADP"
VERSION = 1


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    metadata: dict[str, Any] = field(default_factory=dict)

    @classmethod
    def from_params(cls, params: Mapping[str, Tensor], metadata: dict[str, Any] | None = None,
                    prefixes: tuple[str, ...] | None = None) -> "Checkpoint":
        tensors = {k: t.data.astype("<f4") for k, t in params.items()
                   if prefixes is None or k.startswith(prefixes)}
        return cls(tensors, dict(metadata or {}))

    def to_params(self, prefix: str | tuple[str, ...] = "") -> dict[str, Tensor]:
        """Float64 tensors for every entry whose name starts with ``prefix``."""
        return {k: Tensor(v.astype(np.float64)) for k, v in self.tensors.items() if k.startswith(prefix)}

    def to_bytes(self) -> bytes:
        return dumps(self)


def dumps(ckpt: Checkpoint) -> bytes:
    entries, chunks, offset = [], [], 0
    for name in sorted(ckpt.tensors):
        arr = np.ascontiguousarray(ckpt.tensors[name], dtype="<f4")
        entries.append([name, list(arr.shape), offset])
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps({"metadata": ckpt.metadata, "entries": entries},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = b"".join(chunks)
    return b"".join([MAGIC, struct.pack("<II", VERSION, len(header)), header,
                     struct.pack("<Q", len(payload)), payload])


def loads(blob: bytes) -> Checkpoint:
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise BadMagicError("not a checkpoint: bad magic bytes")
    if len(blob) < 12:
        raise TruncatedCheckpointError("file ends inside the fixed header")
    version, hlen = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise UnsupportedVersionError(f"checkpoint version {version} is not supported (want {VERSION})")
    pos = 12
    if len(blob) < pos + hlen + 8:
        raise TruncatedCheckpointError("file ends inside the metadata header")
    try:
        header = json.loads(blob[pos:pos + hlen].decode("utf-8"))
        metadata, entries = header["metadata"], header["entries"]
    except (ValueError, KeyError, TypeError) as exc:
        raise CorruptCheckpointError(f"unreadable header: {exc}") from None
    pos += hlen
    (plen,) = struct.unpack_from("<Q", blob, pos)
    pos += 8
    payload = blob[pos:pos + plen]
    if len(payload) < plen:
        raise TruncatedCheckpointError(f"payload has {len(payload)} of {plen} bytes")
    tensors: dict[str, np.ndarray] = {}
    spans = []
    for name, shape, offset in entries:
        n = int(np.prod(shape, dtype=np.int64)) * 4
        if offset < 0 or offset + n > plen:
            raise CorruptCheckpointError(f"entry {name!r} lies outside the payload")
        spans.append((offset, offset + n, name))
        tensors[name] = np.frombuffer(payload, dtype="<f4", count=n // 4, offset=offset).reshape(shape).copy()
    spans.sort()
    for (_, end, a), (start, _, b) in zip(spans, spans[1:]):
        if start < end:
            raise CorruptCheckpointError(f"entries {a!r} and {b!r} overlap")
    return Checkpoint(tensors, metadata)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Write atomically: a temporary file in the target directory is renamed into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(dumps(ckpt))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path) -> Checkpoint:
    return loads(Path(path).read_bytes())


def f32_rounding_bound(values: np.ndarray) -> np.ndarray:
    """Half a float32 ulp at each value's magnitude: the most a round trip may move it."""
    v = np.abs(np.asarray(values, dtype=np.float64)).astype(np.float32)
    return np.spacing(v).astype(np.float64) / 2 + np.finfo(np.float32).smallest_subnormal
