"""Binary checkpoint format.

Layout (all integers little-endian)::

    magic      8 bytes  b"CTMAFCKP"
    version    uint32
    meta_len   uint32, then meta_len bytes of UTF-8 "key=<json>\\n" lines (sorted)
    n_arrays   uint32, then per array:
        name_len uint16, name (UTF-8)
        dtype    3 bytes, b"f32" or b"c64"
        ndim     uint8, then ndim x uint64 dims
        payload  little-endian, C order
"""
from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointError

MAGIC = b"CTMAFCKP"
VERSION = 1
_DTYPES = {b"f32": np.dtype("<f4"), b"c64": np.dtype("<c8")}


@dataclass
class Checkpoint:
    kind: str
    arrays: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(MAGIC)
        buf.write(struct.pack("<I", VERSION))
        meta = dict(self.meta, kind=self.kind)
        text = "".join(f"{k}={json.dumps(meta[k], sort_keys=True)}\n" for k in sorted(meta))
        raw = text.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", len(self.arrays)))
        for name in sorted(self.arrays):
            a = np.asarray(self.arrays[name])
            if np.iscomplexobj(a):
                tag = b"c64"
            elif np.issubdtype(a.dtype, np.floating) or np.issubdtype(a.dtype, np.integer):
                tag = b"f32"
            else:
                raise CheckpointError(f"array {name!r} has unsupported dtype {a.dtype}")
            a = np.array(a, dtype=_DTYPES[tag], order="C")
            nm = name.encode("utf-8")
            buf.write(struct.pack("<H", len(nm)))
            buf.write(nm)
            buf.write(tag)
            buf.write(struct.pack("<B", a.ndim))
            buf.write(struct.pack(f"<{a.ndim}Q", *a.shape))
            buf.write(a.tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        view = memoryview(data)
        pos = 0

        def take(n):
            nonlocal pos
            if pos + n > len(view):
                raise CheckpointError("truncated checkpoint")
            chunk = view[pos:pos + n]
            pos += n
            return chunk

        if bytes(take(8)) != MAGIC:
            raise CheckpointError("not a checkpoint file (bad magic)")
        (version,) = struct.unpack("<I", take(4))
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        (meta_len,) = struct.unpack("<I", take(4))
        meta = {}
        for line in bytes(take(meta_len)).decode("utf-8").splitlines():
            key, _, value = line.partition("=")
            meta[key] = json.loads(value)
        (n,) = struct.unpack("<I", take(4))
        arrays = {}
        for _ in range(n):
            (nl,) = struct.unpack("<H", take(2))
            name = bytes(take(nl)).decode("utf-8")
            tag = bytes(take(3))
            if tag not in _DTYPES:
                raise CheckpointError(f"array {name!r}: unknown dtype tag {tag!r}")
            (ndim,) = struct.unpack("<B", take(1))
            shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
            dt = _DTYPES[tag]
            count = int(np.prod(shape)) if ndim else 1
            arrays[name] = np.frombuffer(bytes(take(count * dt.itemsize)), dtype=dt).reshape(shape).copy()
        if pos != len(view):
            raise CheckpointError("trailing bytes after checkpoint payload")
        kind = meta.pop("kind", None)
        if kind is None:
            raise CheckpointError("checkpoint metadata lacks a kind")
        return cls(kind=kind, arrays=arrays, meta=meta)

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    def subset(self, prefix: str) -> dict:
        """Arrays under ``prefix`` with the prefix stripped."""
        return {k[len(prefix):]: v for k, v in self.arrays.items() if k.startswith(prefix)}


def save_checkpoint(path, ckpt: Checkpoint) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(ckpt.to_bytes())
    tmp.replace(path)
    return path


def load_checkpoint(path, kind: str | None = None) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} does not exist")
    ckpt = Checkpoint.from_bytes(path.read_bytes())
    if kind is not None and ckpt.kind != kind:
        raise CheckpointError(f"{path}: expected a {kind!r} checkpoint, found {ckpt.kind!r}")
    return ckpt


def config_hash(snapshot: dict) -> str:
    return hashlib.sha256(json.dumps(snapshot, sort_keys=True, default=str).encode()).hexdigest()[:16]
