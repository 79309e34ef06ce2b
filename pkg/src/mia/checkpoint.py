"""Versioned binary checkpoints.

Layout (little-endian)::

    magic     4s  b"MIAC"
    version   u16
    meta_len  u32
    n_tensors u32
    crc32     u32  over everything after the header
    meta          UTF-8 JSON: config, vocabulary, epoch, loss log,
                  optimizer step, generator state
    n_tensors records:
        name_len u16, name (UTF-8), rank u8, rank x u32 dims,
        float64 row-major data

Records are written in sorted name order and the JSON with sorted keys, so
save -> load -> save reproduces the same bytes.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import AdamState

MAGIC = b"MIAC"
VERSION = 1
_HEADER = struct.Struct("<4sHIII")


class CheckpointError(ValueError):
    """Base class for unreadable checkpoints."""


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointCorruptError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    config: dict
    vocab: list[str]
    params: dict[str, np.ndarray]
    adam: AdamState = field(default_factory=AdamState)
    rng_state: dict | None = None
    epoch: int = 0
    loss_log: list[float] = field(default_factory=list)

    def to_bytes(self) -> bytes:
        meta = {
            "config": self.config,
            "vocab": self.vocab,
            "epoch": self.epoch,
            "loss_log": self.loss_log,
            "adam_step": self.adam.step,
            "rng_state": _jsonable(self.rng_state),
        }
        meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
        records = {f"param/{k}": v for k, v in self.params.items()}
        records.update({f"adam_m/{k}": v for k, v in self.adam.m.items()})
        records.update({f"adam_v/{k}": v for k, v in self.adam.v.items()})
        body = bytearray(meta_bytes)
        for name in sorted(records):
            arr = np.ascontiguousarray(records[name], dtype="<f8")
            raw = name.encode("utf-8")
            body += struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim)
            body += struct.pack(f"<{arr.ndim}I", *arr.shape) + arr.tobytes()
        header = _HEADER.pack(MAGIC, VERSION, len(meta_bytes), len(records), zlib.crc32(body))
        return header + bytes(body)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        if len(data) < _HEADER.size:
            raise CheckpointTruncatedError(f"file too short for header ({len(data)} bytes)")
        magic, version, meta_len, n_tensors, crc = _HEADER.unpack_from(data)
        if magic != MAGIC:
            raise CheckpointMagicError(f"bad magic {magic!r}")
        if version != VERSION:
            raise CheckpointVersionError(f"unsupported checkpoint version {version}")
        body = memoryview(data)[_HEADER.size :]
        if meta_len > len(body):
            raise CheckpointTruncatedError("metadata block truncated")
        if zlib.crc32(body) != crc:
            raise CheckpointCorruptError("checksum mismatch")
        try:
            meta = json.loads(bytes(body[:meta_len]).decode("utf-8"))
        except (UnicodeDecodeError, ValueError) as exc:
            raise CheckpointCorruptError(f"unreadable metadata: {exc}") from exc

        records: dict[str, np.ndarray] = {}
        pos = meta_len
        try:
            for _ in range(n_tensors):
                (name_len,) = struct.unpack_from("<H", body, pos)
                pos += 2
                name = bytes(body[pos : pos + name_len]).decode("utf-8")
                pos += name_len
                (rank,) = struct.unpack_from("<B", body, pos)
                pos += 1
                dims = struct.unpack_from(f"<{rank}I", body, pos)
                pos += 4 * rank
                count = int(np.prod(dims)) if rank else 1
                if pos + 8 * count > len(body):
                    raise CheckpointTruncatedError(f"tensor {name!r} truncated")
                records[name] = np.frombuffer(body, dtype="<f8", count=count, offset=pos).reshape(dims).copy()
                pos += 8 * count
        except (struct.error, UnicodeDecodeError) as exc:
            raise CheckpointTruncatedError(f"tensor records truncated: {exc}") from exc
        if pos != len(body):
            raise CheckpointCorruptError(f"{len(body) - pos} trailing bytes after tensor records")

        def group(prefix):
            return {k[len(prefix) :]: v for k, v in records.items() if k.startswith(prefix)}

        try:
            adam = AdamState(int(meta["adam_step"]), group("adam_m/"), group("adam_v/"))
            return cls(
                config=meta["config"],
                vocab=list(meta["vocab"]),
                params=group("param/"),
                adam=adam,
                rng_state=_from_jsonable(meta.get("rng_state")),
                epoch=int(meta["epoch"]),
                loss_log=[float(x) for x in meta["loss_log"]],
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise CheckpointCorruptError(f"incomplete metadata: {exc}") from exc

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())

    def num_parameters(self, prefix: str = "") -> int:
        return int(sum(v.size for k, v in self.params.items() if k.startswith(prefix)))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, np.ndarray):
        return {"__ndarray__": obj.tolist(), "dtype": str(obj.dtype)}
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def _from_jsonable(obj):
    if isinstance(obj, dict):
        if "__ndarray__" in obj:
            return np.array(obj["__ndarray__"], dtype=obj["dtype"])
        return {k: _from_jsonable(v) for k, v in obj.items()}
    return obj
