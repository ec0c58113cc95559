"""
Versioned binary weight files.

Layout (little-endian):
    b"NBTS" | u16 version | u32 config length | config JSON (utf-8)
    u32 tensor count
    per tensor: u32 name length | name (utf-8) | u32 rows | u32 cols | rows*cols f64
Vectors are stored as rows = len, cols = 1.
"""
import logging
import os
import struct
from typing import BinaryIO, Optional

import numpy as np

from utils.model import ModelConfig, ParamStore, param_shapes

logger = logging.getLogger(__name__)

MAGIC = b"NBTS"
VERSION = 1


class WeightFileError(ValueError):
    """Raised for unreadable, truncated or mismatching weight files."""


def save_params(store: ParamStore, path: str) -> str:
    config_bytes = store.cfg.to_json().encode("utf-8")
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<HI", VERSION, len(config_bytes)))
        f.write(config_bytes)
        f.write(struct.pack("<I", len(store)))
        for name, tensor in store.items():
            name_bytes = name.encode("utf-8")
            rows, cols = (tensor.shape[0], 1) if tensor.ndim == 1 else tensor.shape
            f.write(struct.pack("<I", len(name_bytes)))
            f.write(name_bytes)
            f.write(struct.pack("<II", rows, cols))
            f.write(np.ascontiguousarray(tensor, dtype="<f8").tobytes())
    logger.debug(f"Saved {len(store)} tensors to {path}")
    return path


def _read(f: BinaryIO, count: int, what: str) -> bytes:
    data = f.read(count)
    if len(data) != count:
        raise WeightFileError(f"weight file truncated while reading {what} ({len(data)} of {count} bytes)")
    return data


def read_config(path: str) -> ModelConfig:
    with open(path, "rb") as f:
        return _read_header(f, path)


def _read_header(f: BinaryIO, path: str) -> ModelConfig:
    magic = f.read(len(MAGIC))
    if magic != MAGIC:
        raise WeightFileError(f"{path} is not a weight file (magic {magic!r})")
    version, config_len = struct.unpack("<HI", _read(f, 6, "header"))
    if version != VERSION:
        raise WeightFileError(f"{path} has format version {version}, this build reads {VERSION}")
    try:
        return ModelConfig.from_json(_read(f, config_len, "model config").decode("utf-8"))
    except (ValueError, KeyError, TypeError) as e:
        raise WeightFileError(f"{path} carries an invalid model config: {e}") from e


def load_params(path: str, expected: Optional[ModelConfig] = None) -> ParamStore:
    """Reads a weight file; with ``expected`` the stored config must match it exactly."""
    with open(path, "rb") as f:
        cfg = _read_header(f, path)
        if expected is not None and cfg != expected:
            raise WeightFileError(f"{path} was saved for a different model config than the one requested")
        shapes = param_shapes(cfg)
        (count,) = struct.unpack("<I", _read(f, 4, "tensor count"))
        if count != len(shapes):
            raise WeightFileError(f"{path} holds {count} tensors, config defines {len(shapes)}")
        tensors = {}
        for index in range(count):
            (name_len,) = struct.unpack("<I", _read(f, 4, f"name length of tensor #{index}"))
            name = _read(f, name_len, f"name of tensor #{index}").decode("utf-8")
            rows, cols = struct.unpack("<II", _read(f, 8, f"shape of tensor '{name}'"))
            if name not in shapes:
                raise WeightFileError(f"{path} holds unexpected tensor '{name}'")
            expected_shape = shapes[name]
            if rows * cols != int(np.prod(expected_shape)):
                raise WeightFileError(f"tensor '{name}' is {rows}x{cols}, config expects {expected_shape}")
            data = _read(f, rows * cols * 8, f"data of tensor '{name}'")
            tensors[name] = np.frombuffer(data, dtype="<f8").astype(np.float64).reshape(expected_shape)
        if f.read(1):
            raise WeightFileError(f"{path} has trailing bytes after the last tensor")
    return ParamStore(cfg, tensors)
