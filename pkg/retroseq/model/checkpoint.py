"""Saving and loading model weights.

Checkpoints use a little-endian binary format::

    magic "RSMD" | version u32 | config length u32 | config (canonical JSON)
    | parameter count u32
    | per parameter: name length u16 | name (UTF-8) | ndim u32 | dims ndim*u32
                     | values f32
    | CRC32 u32 of all preceding bytes

Parameters are written in declaration order, so two models built from the same
config and trained identically give byte-identical checkpoints.
"""
from __future__ import annotations

import json
import logging
import struct
import zlib
from pathlib import Path

import numpy as np

from retroseq.model.config import ModelConfig
from retroseq.model.network import RetroSeqModel
from retroseq.util import ConfigError, RetroSeqError, canonical_json

logger = logging.getLogger(__name__)

MAGIC = b"RSMD"
VERSION = 1

_HEADER = struct.Struct("<4sII")
_U32 = struct.Struct("<I")
_NAME_LENGTH = struct.Struct("<H")


class CheckpointFormatError(RetroSeqError, ValueError):
    """Raised when a checkpoint file is malformed."""


def to_bytes(model: RetroSeqModel) -> bytes:
    """Serializes the config and weights of a model."""
    config = canonical_json(model.config.settings()).encode("utf-8")
    params = model.named_parameters()
    parts = [_HEADER.pack(MAGIC, VERSION, len(config)), config, _U32.pack(len(params))]
    for name, param in params.items():
        encoded = name.encode("utf-8")
        parts.append(_NAME_LENGTH.pack(len(encoded)))
        parts.append(encoded)
        parts.append(_U32.pack(param.ndim))
        parts.append(struct.pack(f"<{param.ndim}I", *param.shape))
        parts.append(np.ascontiguousarray(param.data, dtype="<f4").tobytes())
    data = b"".join(parts)
    return data + _U32.pack(zlib.crc32(data))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def read(self, size: int, what: str) -> bytes:
        if self.offset + size > len(self.data):
            raise CheckpointFormatError(f"truncated checkpoint while reading {what}")
        chunk = self.data[self.offset : self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt: struct.Struct, what: str) -> tuple:
        return fmt.unpack(self.read(fmt.size, what))


def from_bytes(data: bytes) -> RetroSeqModel:
    """Rebuilds a model from a serialized checkpoint.

    Raises:
        CheckpointFormatError: If the data is not a valid checkpoint or does
            not match the architecture its config describes.
    """
    if data[:4] != MAGIC:
        raise CheckpointFormatError(
            f"not a retroseq checkpoint: expected magic {MAGIC!r}, found {data[:4]!r}"
        )
    if len(data) < _HEADER.size + _U32.size:
        raise CheckpointFormatError("truncated checkpoint header")
    (crc,) = _U32.unpack_from(data, len(data) - _U32.size)
    body = data[: -_U32.size]

    reader = _Reader(body)
    _, version, config_length = reader.unpack(_HEADER, "header")
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}, expected {VERSION}")
    if crc != zlib.crc32(body):
        raise CheckpointFormatError("checkpoint checksum mismatch")

    try:
        settings = json.loads(reader.read(config_length, "config").decode("utf-8"))
        config = ModelConfig.from_settings(settings)
    except (UnicodeDecodeError, json.JSONDecodeError, ConfigError, TypeError) as exc:
        raise CheckpointFormatError(f"invalid checkpoint config: {exc}") from exc

    (count,) = reader.unpack(_U32, "parameter count")
    values = {}
    for _ in range(count):
        (name_length,) = reader.unpack(_NAME_LENGTH, "parameter name")
        name = reader.read(name_length, "parameter name").decode("utf-8")
        (ndim,) = reader.unpack(_U32, f"shape of {name}")
        shape = struct.unpack(f"<{ndim}I", reader.read(4 * ndim, f"shape of {name}"))
        size = int(np.prod(shape, dtype=np.int64))
        raw = reader.read(4 * size, f"values of {name}")
        values[name] = np.frombuffer(raw, dtype="<f4").reshape(shape)
    if reader.offset != len(body):
        raise CheckpointFormatError(f"{len(body) - reader.offset} unexpected bytes in checkpoint")

    model = RetroSeqModel(config)
    expected = list(model.named_parameters())
    if list(values) != expected:
        raise CheckpointFormatError("checkpoint parameters do not match the model architecture")
    try:
        model.load_parameters(values)
    except ValueError as exc:
        raise CheckpointFormatError(str(exc)) from exc
    return model


def save_model(model: RetroSeqModel, filename: str | Path):
    """Writes a model checkpoint.

    Args:
        model: The model.
        filename: The checkpoint file.
    """
    Path(filename).write_bytes(to_bytes(model))
    logger.info("saved checkpoint with %d parameters to %s", model.parameter_count(), filename)


def load_model(filename: str | Path) -> RetroSeqModel:
    """Reads a model checkpoint.

    The returned model is in evaluation mode.

    Args:
        filename: The checkpoint file.

    Returns:
        The model.
    """
    model = from_bytes(Path(filename).read_bytes())
    model.eval()
    return model
