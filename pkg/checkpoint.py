"""
Checkpoint module for boxboost
Versioned binary container holding a network's config, step counter and float32 parameters

Layout (little-endian):
    magic     4 bytes  b"BXBT"
    version   uint16
    cfg_len   uint32, followed by cfg_len bytes of canonical JSON (NetworkConfig)
    step      uint64
    count     uint32, followed by count tensors:
        name_len uint16, name (UTF-8), ndim uint8, ndim x uint32 dims, float32 data
"""

import json
import os
import struct
from typing import Union

import numpy as np

from errors import BoxBoostError, DataIOError, ParseError
from toynet import NetworkConfig, NetworkState

MAGIC = b"BXBT"
VERSION = 1

PathLike = Union[str, os.PathLike]


def encode(state: NetworkState) -> bytes:
    cfg_json = json.dumps(state.config.to_dict(), sort_keys=True, separators=(",", ":")).encode("utf-8")
    chunks = [MAGIC, struct.pack("<HI", VERSION, len(cfg_json)), cfg_json,
              struct.pack("<QI", state.step, len(state.params))]
    for name in sorted(state.params):
        tensor = state.params[name]
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)) + encoded)
        chunks.append(struct.pack("<B", tensor.ndim) + struct.pack(f"<{tensor.ndim}I", *tensor.shape))
        chunks.append(np.ascontiguousarray(tensor, dtype="<f4").tobytes())
    return b"".join(chunks)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, count: int, what: str) -> bytes:
        if self.pos + count > len(self.data):
            raise ParseError(f"Checkpoint truncated while reading {what}", offset=self.pos)
        chunk = self.data[self.pos:self.pos + count]
        self.pos += count
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode(data: bytes) -> NetworkState:
    reader = _Reader(data)
    if reader.take(4, "magic") != MAGIC:
        raise ParseError("Not a boxboost checkpoint (bad magic)", offset=0)
    version, cfg_len = reader.unpack("<HI", "header")
    if version != VERSION:
        raise ParseError(f"Unsupported checkpoint version {version}", offset=4)
    cfg_offset = reader.pos
    try:
        cfg = NetworkConfig.from_dict(json.loads(reader.take(cfg_len, "config").decode("utf-8")))
    except (ValueError, TypeError) as e:
        raise ParseError(f"Invalid checkpoint config: {e}", offset=cfg_offset)
    except BoxBoostError as e:
        raise ParseError(f"Invalid checkpoint config: {e.message}", offset=cfg_offset)

    step, count = reader.unpack("<QI", "step counter")
    params = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<H", "tensor name")
        name = reader.take(name_len, "tensor name").decode("utf-8")
        (ndim,) = reader.unpack("<B", "tensor rank")
        shape = reader.unpack(f"<{ndim}I", "tensor shape")
        size = int(np.prod(shape)) if ndim else 1
        raw = reader.take(4 * size, f"tensor {name}")
        params[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float64)
    if reader.pos != len(data):
        raise ParseError("Trailing bytes after last tensor", offset=reader.pos)

    try:
        return NetworkState(cfg, params, step=step)
    except BoxBoostError as e:
        raise ParseError(f"Checkpoint tensors do not match config: {e.message}", offset=cfg_offset)


def save_checkpoint(path: PathLike, state: NetworkState) -> str:
    directory = os.path.dirname(os.fspath(path))
    if directory:
        os.makedirs(directory, exist_ok=True)
    try:
        with open(path, "wb") as handle:
            handle.write(encode(state))
    except OSError as e:
        raise DataIOError(f"Cannot write checkpoint '{path}': {e.strerror or e}")
    return os.fspath(path)


def load_checkpoint(path: PathLike) -> NetworkState:
    try:
        with open(path, "rb") as handle:
            data = handle.read()
    except OSError as e:
        raise DataIOError(f"Cannot read checkpoint '{path}': {e.strerror or e}")
    return decode(data)
