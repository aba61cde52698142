"""Binary checkpoint format.

Layout (all integers little-endian):

    magic   4 bytes         b"MARC"
    version u32             currently 1
    config  u64 length + canonical JSON (sorted keys, compact separators)
    weights u64 entry count, then per entry:
                name  u16 length + UTF-8 bytes
                rank  u8
                extents rank x u64
                data  prod(extents) x float32
    state   u8 flag
            if 1: epoch u64, adam step u64, then three entry blocks in the
            same encoding: BN running buffers, first moments, second moments

Floats are stored as 32-bit little-endian regardless of compute precision.
Entry names are unique; a load-then-save round trip is byte-identical.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"MARC"
VERSION = 1


class CheckpointError(Exception):
    """Base class for checkpoint format errors."""


class BadMagicError(CheckpointError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


class TruncatedError(CheckpointError):
    pass


class DuplicateNameError(CheckpointError):
    pass


@dataclass
class TrainState:
    """Optimizer and normalization state carried alongside the weights."""

    epoch: int
    step: int
    buffers: dict[str, np.ndarray] = field(default_factory=dict)
    first_moments: dict[str, np.ndarray] = field(default_factory=dict)
    second_moments: dict[str, np.ndarray] = field(default_factory=dict)


@dataclass
class Checkpoint:
    config: dict
    params: dict[str, np.ndarray]
    state: TrainState | None = None
    version: int = VERSION


def _encode_entries(entries: dict[str, np.ndarray]) -> bytes:
    out = [struct.pack("<Q", len(entries))]
    seen = set()
    for name, arr in entries.items():
        if name in seen:
            raise DuplicateNameError(f"duplicate entry name {name!r}")
        seen.add(name)
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise CheckpointError(f"entry name too long: {name!r}")
        a = np.asarray(arr, dtype="<f4")  # tobytes() emits C order regardless
        if a.ndim > 0xFF:
            raise CheckpointError(f"{name}: rank {a.ndim} too large")
        out.append(struct.pack("<H", len(raw)))
        out.append(raw)
        out.append(struct.pack("<B", a.ndim))
        out.append(struct.pack(f"<{a.ndim}Q", *a.shape) if a.ndim else b"")
        out.append(a.tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise TruncatedError(
                f"needed {n} bytes at offset {self.pos}, file has {len(self.blob)}"
            )
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return struct.unpack("<B", self.take(1))[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]


def _decode_entries(r: _Reader) -> dict[str, np.ndarray]:
    n = r.u64()
    out: dict[str, np.ndarray] = {}
    for _ in range(n):
        name = r.take(r.u16()).decode("utf-8")
        if name in out:
            raise DuplicateNameError(f"duplicate entry name {name!r}")
        rank = r.u8()
        shape = struct.unpack(f"<{rank}Q", r.take(8 * rank)) if rank else ()
        count = 1
        for e in shape:
            count *= e
        data = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape)
        out[name] = data.copy()  # own the memory; frombuffer views the blob
    return out


def checkpoint_to_bytes(ckpt: Checkpoint) -> bytes:
    config_blob = json.dumps(ckpt.config, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [
        MAGIC,
        struct.pack("<I", ckpt.version),
        struct.pack("<Q", len(config_blob)),
        config_blob,
        _encode_entries(ckpt.params),
    ]
    if ckpt.state is None:
        parts.append(struct.pack("<B", 0))
    else:
        parts.append(struct.pack("<B", 1))
        parts.append(struct.pack("<Q", ckpt.state.epoch))
        parts.append(struct.pack("<Q", ckpt.state.step))
        parts.append(_encode_entries(ckpt.state.buffers))
        parts.append(_encode_entries(ckpt.state.first_moments))
        parts.append(_encode_entries(ckpt.state.second_moments))
    return b"".join(parts)


def checkpoint_from_bytes(blob: bytes) -> Checkpoint:
    r = _Reader(blob)
    magic = r.take(4)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
    version = r.u32()
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported version {version}, expected {VERSION}")
    try:
        config = json.loads(r.take(r.u64()).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"bad config blob: {exc}") from None
    params = _decode_entries(r)
    state = None
    if r.u8():
        epoch, step = r.u64(), r.u64()
        state = TrainState(
            epoch=epoch,
            step=step,
            buffers=_decode_entries(r),
            first_moments=_decode_entries(r),
            second_moments=_decode_entries(r),
        )
    if r.pos != len(blob):
        raise CheckpointError(f"{len(blob) - r.pos} trailing bytes after checkpoint")
    return Checkpoint(config=config, params=params, state=state, version=version)


def save_checkpoint(path: str, ckpt: Checkpoint) -> None:
    with open(path, "wb") as f:
        f.write(checkpoint_to_bytes(ckpt))


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as f:
        return checkpoint_from_bytes(f.read())
