from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from typing import Dict

import numpy as np

from app.errors import (
    BadMagicError,
    CorruptFileError,
    TruncatedFileError,
    UnsupportedVersionError,
)
from app.models import ModelConfig
from app.network import TCtrans, build_model
from app.utils import canonical_json, parse_record


CHECKPOINT_MAGIC = b"TCTC"
CHECKPOINT_VERSION = 1

_U32 = struct.Struct("<I")


@dataclass
class Checkpoint:
    config: ModelConfig
    state: Dict[str, np.ndarray]

    @classmethod
    def from_model(cls, model: TCtrans) -> "Checkpoint":
        return cls(config=model.config, state=model.state_dict())

    def to_model(self) -> TCtrans:
        model = build_model(self.config, seed=0)
        model.load_state_dict(self.state)
        return model


def encode_checkpoint(checkpoint: Checkpoint) -> bytes:
    config_record = canonical_json(checkpoint.config.model_dump(mode="json")).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, _U32.pack(CHECKPOINT_VERSION), _U32.pack(len(config_record)), config_record]
    parts.append(_U32.pack(len(checkpoint.state)))
    for name, array in checkpoint.state.items():
        encoded = name.encode("utf-8")
        parts.append(_U32.pack(len(encoded)))
        parts.append(encoded)
        parts.append(_U32.pack(array.ndim))
        parts.extend(_U32.pack(extent) for extent in array.shape)
        parts.append(np.ascontiguousarray(array, dtype="<f4").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, blob: bytes) -> None:
        self.blob = blob
        self.offset = 0

    def take(self, count: int, what: str) -> bytes:
        end = self.offset + count
        if end > len(self.blob):
            raise TruncatedFileError(f"checkpoint truncated while reading {what} at byte {self.offset}")
        chunk = self.blob[self.offset : end]
        self.offset = end
        return chunk

    def u32(self, what: str) -> int:
        return _U32.unpack(self.take(4, what))[0]


def decode_checkpoint(blob: bytes) -> Checkpoint:
    reader = _Reader(blob)
    magic = reader.take(4, "magic")
    if magic != CHECKPOINT_MAGIC:
        raise BadMagicError(f"checkpoint magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
    version = reader.u32("version")
    if version != CHECKPOINT_VERSION:
        raise UnsupportedVersionError(f"checkpoint version {version}, supported {CHECKPOINT_VERSION}")
    record = reader.take(reader.u32("config length"), "config record")
    config = parse_record(ModelConfig, record, CorruptFileError, "checkpoint config record")
    state: Dict[str, np.ndarray] = {}
    for _ in range(reader.u32("parameter count")):
        raw_name = reader.take(reader.u32("name length"), "name")
        try:
            name = raw_name.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CorruptFileError(f"checkpoint parameter name {raw_name!r} is not UTF-8") from exc
        rank = reader.u32("rank")
        shape = tuple(reader.u32("extent") for _ in range(rank))
        count = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(reader.take(4 * count, f"tensor {name}"), dtype="<f4")
        state[name] = data.reshape(shape).astype(np.float32)
    if reader.offset != len(blob):
        raise CorruptFileError(f"checkpoint has {len(blob) - reader.offset} trailing bytes")
    return Checkpoint(config=config, state=state)


def save_checkpoint(checkpoint: Checkpoint, path: str) -> None:
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "wb") as handle:
        handle.write(encode_checkpoint(checkpoint))


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as handle:
        return decode_checkpoint(handle.read())
