"""Single-file named-tensor checkpoints.

Layout (little endian)::

    8 bytes   magic  b"MDVLCKPT"
    u32       format version
    u64       header length H
    H bytes   UTF-8 JSON header (profile, encoder config, tags, meta, tensor index)
    u64       payload length P
    P bytes   float32 tensor data, row-major, in index order
"""
from __future__ import annotations

import json
import os
import re
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"MDVLCKPT"
VERSION = 1
NAME_RE = re.compile(r"^(student|teacher|classifier|aggregator|features|labels)(\.[A-Za-z0-9_]+)*$")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    profile: str
    encoder: dict
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    tags: list[str] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def subset(self, prefix: str) -> dict[str, np.ndarray]:
        """Tensors under ``prefix.`` with the prefix stripped."""
        p = prefix + "."
        return {k[len(p):]: v for k, v in self.tensors.items() if k.startswith(p)}

    def put(self, prefix: str, state: dict[str, np.ndarray]):
        for k, v in state.items():
            self.tensors[f"{prefix}.{k}"] = np.array(v, dtype=np.float32, copy=True)

    def drop(self, prefix: str):
        for k in [k for k in self.tensors if k.startswith(prefix + ".")]:
            del self.tensors[k]

    def copy(self) -> "Checkpoint":
        return Checkpoint(self.profile, dict(self.encoder),
                          {k: v.copy() for k, v in self.tensors.items()},
                          list(self.tags), json.loads(json.dumps(self.meta)))

    def add_tag(self, tag: str):
        if tag not in self.tags:
            self.tags.append(tag)


def _check_name(name: str):
    if not NAME_RE.match(name):
        raise CheckpointError(f"unknown tensor name {name!r}")


def dumps(ckpt: Checkpoint) -> bytes:
    index, chunks, offset = [], [], 0
    for name in sorted(ckpt.tensors):
        _check_name(name)
        arr = np.ascontiguousarray(ckpt.tensors[name], dtype="<f4")
        raw = arr.tobytes()
        index.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = {"profile": ckpt.profile, "encoder": ckpt.encoder, "tags": list(ckpt.tags),
              "meta": ckpt.meta, "tensors": index}
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = b"".join(chunks)
    return b"".join([MAGIC, struct.pack("<I", VERSION), struct.pack("<Q", len(hbytes)), hbytes,
                     struct.pack("<Q", len(payload)), payload])


def loads(blob: bytes, source: str = "<bytes>") -> Checkpoint:
    if len(blob) < 20 or blob[:8] != MAGIC:
        raise CheckpointError(f"{source}: not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", blob, 8)
    if version != VERSION:
        raise CheckpointError(f"{source}: unsupported checkpoint version {version} (expected {VERSION})")
    (hlen,) = struct.unpack_from("<Q", blob, 12)
    pos = 20
    if pos + hlen + 8 > len(blob):
        raise CheckpointError(f"{source}: truncated header")
    try:
        header = json.loads(blob[pos:pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{source}: corrupt header: {exc}") from None
    pos += hlen
    (plen,) = struct.unpack_from("<Q", blob, pos)
    pos += 8
    payload = blob[pos:]
    if len(payload) != plen:
        raise CheckpointError(f"{source}: truncated payload ({len(payload)} of {plen} bytes)")
    tensors = {}
    for entry in header["tensors"]:
        name = entry["name"]
        _check_name(name)
        shape = tuple(entry["shape"])
        start, nbytes = entry["offset"], entry["nbytes"]
        if start + nbytes > plen or nbytes != 4 * int(np.prod(shape, dtype=np.int64)):
            raise CheckpointError(f"{source}: tensor {name} out of bounds")
        arr = np.frombuffer(payload, dtype="<f4", count=nbytes // 4, offset=start)
        tensors[name] = arr.reshape(shape).astype(np.float32)
    return Checkpoint(header["profile"], header["encoder"], tensors, header["tags"], header["meta"])


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    """Write atomically via a temp file in the target directory."""
    path = Path(path)
    blob = dumps(ckpt)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def load_checkpoint(path, profile: str | None = None, encoder: dict | None = None) -> Checkpoint:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc.strerror or exc}") from None
    ckpt = loads(blob, str(path))
    if profile is not None and ckpt.profile != profile:
        raise CheckpointError(f"{path}: checkpoint profile {ckpt.profile!r} does not match {profile!r}")
    if encoder is not None:
        diffs = {k: (ckpt.encoder.get(k), v) for k, v in encoder.items() if ckpt.encoder.get(k) != v}
        if diffs:
            raise CheckpointError(f"{path}: encoder geometry mismatch {diffs}")
    return ckpt
