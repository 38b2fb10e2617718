"""
Binary checkpoint files.

Little-endian layout: magic ``BDTC``; u32 version; u32 length + UTF-8 JSON
metadata; u32 tensor count; per tensor a u16 length + UTF-8 name, u8 rank,
u64 extents and float64 row-major payload; then a CRC-32 over everything
after the magic.
"""
import json
import logging
import os
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Optional, Union

import numpy as np

from ..errors import CorruptionError, FormatError, VersionError
from ..models import Hyperparams
from .dataset import Normalizer
from .forecasters import Forecaster, build_model

logger = logging.getLogger(__name__)

MAGIC = b"BDTC"
VERSION = 1


@dataclass(frozen=True)
class Checkpoint:
    version: int
    metadata: Dict[str, Any]
    tensors: Dict[str, np.ndarray]

    @property
    def kind(self) -> str:
        return self.metadata["kind"]

    @property
    def hyperparams(self) -> Hyperparams:
        return Hyperparams(**self.metadata["hyperparams"])

    @property
    def normalizer(self) -> Optional[Normalizer]:
        raw = self.metadata.get("normalizer")
        return None if raw is None else Normalizer.from_dict(raw)

    def to_model(self) -> Forecaster:
        model = build_model(self.kind, self.hyperparams)
        model.load_state(self.tensors, strict=True)
        return model


def encode_checkpoint(model: Forecaster, metadata: Optional[Dict[str, Any]] = None) -> bytes:
    meta = {**(metadata or {}), "kind": model.kind, "hyperparams": model.hp.model_dump(mode="json")}
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    params = list(model.named_parameters())

    parts = [struct.pack("<II", VERSION, len(meta_bytes)), meta_bytes, struct.pack("<I", len(params))]
    for name, t in params:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack(f"<B{t.ndim}Q", t.ndim, *t.shape))
        parts.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    body = b"".join(parts)
    return MAGIC + body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def save_checkpoint(model: Forecaster, path: Union[str, Path], metadata: Optional[Dict[str, Any]] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = encode_checkpoint(model, metadata)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)
    logger.info("checkpoint written: %s (%d bytes)", path, len(blob))
    return path


class _Reader:
    def __init__(self, body: bytes):
        self.body = body
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.body):
            raise CorruptionError("checkpoint payload ends early")
        chunk = self.body[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_checkpoint(blob: bytes) -> Checkpoint:
    if blob[:4] != MAGIC:
        raise FormatError("not a checkpoint file (bad magic)")
    if len(blob) < 4 + 8 + 4:
        raise CorruptionError("checkpoint is truncated")
    body, (stored,) = blob[4:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != stored:
        raise CorruptionError("checkpoint checksum mismatch (corrupted or truncated)")

    reader = _Reader(body)
    version, meta_len = reader.unpack("<II")
    if version != VERSION:
        raise VersionError(f"checkpoint version {version} is not supported (expected {VERSION})")
    try:
        metadata = json.loads(reader.take(meta_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CorruptionError(f"checkpoint metadata is unreadable: {e}") from e

    (count,) = reader.unpack("<I")
    tensors = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        name = reader.take(name_len).decode("utf-8")
        (rank,) = reader.unpack("<B")
        shape = reader.unpack(f"<{rank}Q") if rank else ()
        size = int(np.prod(shape, dtype=np.int64)) if rank else 1
        data = np.frombuffer(reader.take(8 * size), dtype="<f8").astype(np.float64)
        tensors[name] = data.reshape(shape)
    if reader.pos != len(body):
        raise CorruptionError(f"{len(body) - reader.pos} trailing bytes after the last tensor")
    return Checkpoint(version, metadata, tensors)


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())
