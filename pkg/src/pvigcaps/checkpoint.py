"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"PVGC"  u32 version
    u32 n + n bytes     JSON metadata (model config, epoch, rng state, extras)
    tensor table        model tensors
    u64 step            optimizer step counter
    tensor table        optimizer moments, named "m/<param>" and "v/<param>"
    u32                 CRC-32 of every preceding byte

A tensor table is ``u32 count`` followed by, per tensor, ``u32 name length,
name (UTF-8), u32 rank, rank × u64 extents, float64 values``.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import (CheckpointChecksumError, CheckpointError, CheckpointTruncatedError,
                         CheckpointVersionError)
from .training import OptState

MAGIC = b"PVGC"
VERSION = 1


@dataclass
class Checkpoint:
    model_config: dict
    tensors: dict[str, np.ndarray]
    opt_state: OptState = field(default_factory=OptState)
    epoch: int = -1
    rng_state: dict | None = None
    extra: dict = field(default_factory=dict)
    version: int = VERSION


def _pack_table(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


def encode(ckpt: Checkpoint) -> bytes:
    meta = {"model_config": ckpt.model_config, "epoch": ckpt.epoch,
            "rng_state": ckpt.rng_state, "extra": ckpt.extra}
    meta_raw = json.dumps(meta, sort_keys=True).encode("utf-8")
    opt = {}
    for name in ckpt.opt_state.m:
        opt[f"m/{name}"] = ckpt.opt_state.m[name]
        opt[f"v/{name}"] = ckpt.opt_state.v[name]
    body = b"".join([
        MAGIC, struct.pack("<I", ckpt.version),
        struct.pack("<I", len(meta_raw)), meta_raw,
        _pack_table(ckpt.tensors),
        struct.pack("<Q", ckpt.opt_state.step),
        _pack_table(opt),
    ])
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.buf):
            raise CheckpointTruncatedError(f"checkpoint ends early (wanted {n} bytes at offset {self.pos})")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def table(self) -> dict[str, np.ndarray]:
        (count,) = self.unpack("<I")
        out = {}
        for _ in range(count):
            (n,) = self.unpack("<I")
            name = self.take(n).decode("utf-8")
            (rank,) = self.unpack("<I")
            shape = self.unpack(f"<{rank}Q") if rank else ()
            size = int(np.prod(shape)) if rank else 1
            out[name] = np.frombuffer(self.take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
        return out


def decode(buf: bytes) -> Checkpoint:
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic bytes)")
    (version,) = r.unpack("<I")
    if version > VERSION:
        raise CheckpointVersionError(f"checkpoint version {version} is newer than supported version {VERSION}")
    if version < 1:
        raise CheckpointVersionError(f"invalid checkpoint version {version}")
    (n,) = r.unpack("<I")
    try:
        meta = json.loads(r.take(n).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointChecksumError(f"corrupt metadata: {exc}") from exc
    tensors = r.table()
    (step,) = r.unpack("<Q")
    opt = r.table()
    (stored,) = r.unpack("<I")
    if r.pos != len(buf):
        raise CheckpointChecksumError(f"{len(buf) - r.pos} unexpected trailing bytes")
    if zlib.crc32(buf[:-4]) != stored:
        raise CheckpointChecksumError("checksum mismatch")
    state = OptState(step=int(step))
    for name, arr in opt.items():
        kind, _, pname = name.partition("/")
        (state.m if kind == "m" else state.v)[pname] = arr
    return Checkpoint(meta["model_config"], tensors, state, meta["epoch"], meta["rng_state"],
                      meta.get("extra", {}), version)


def checkpoint_save(path, ckpt: Checkpoint) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(ckpt))
    os.replace(tmp, path)


def checkpoint_load(path) -> Checkpoint:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode(buf)


def model_checkpoint(model, opt_state=None, epoch: int = -1, rng_state=None, state=None, **extra) -> Checkpoint:
    """Checkpoint of ``model`` (or of ``state`` tensors built for it)."""
    return Checkpoint(model.config.to_dict(), dict(state if state is not None else model.state_dict()),
                      opt_state or OptState(), epoch, rng_state, extra)


def restore_model(ckpt: Checkpoint):
    """Rebuild the model described by the checkpoint and load its tensors."""
    from .backbone import ModelConfig
    from .model import PViGNet

    model = PViGNet(ModelConfig.from_dict(ckpt.model_config))
    model.load_state_dict(ckpt.tensors)
    return model
