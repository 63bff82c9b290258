"""
PGM module for boxboost
Binary (P5) portable graymap codec for images, masks, pseudo labels and probability maps
"""

import os
from typing import Tuple, Union

import numpy as np

from errors import DataIOError, ParseError

MAGIC = b"P5"
WHITESPACE = b" \t\n\r\v\f"

PathLike = Union[str, os.PathLike]


def decode(data: bytes) -> Tuple[np.ndarray, int]:
    """Decode P5 bytes into (H x W array, maxval)"""
    if data[:2] != MAGIC:
        raise ParseError("Not a binary PGM file (expected magic 'P5')", offset=0)

    pos = 2
    fields = []
    while len(fields) < 3:
        # whitespace and comments between header fields
        while pos < len(data) and (data[pos] in WHITESPACE or data[pos:pos + 1] == b"#"):
            if data[pos:pos + 1] == b"#":
                end = data.find(b"\n", pos)
                pos = len(data) if end < 0 else end + 1
            else:
                pos += 1
        start = pos
        while pos < len(data) and data[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise ParseError("Malformed PGM header: expected a decimal number", offset=start)
        fields.append(int(data[start:pos]))

    if pos >= len(data) or data[pos] not in WHITESPACE:
        raise ParseError("Malformed PGM header: missing whitespace after maxval", offset=pos)
    pos += 1

    width, height, maxval = fields
    if width < 1 or height < 1:
        raise ParseError(f"PGM dimensions must be positive, got {width}x{height}", offset=2)
    if not 0 < maxval < 65536:
        raise ParseError(f"PGM maxval must be in 1..65535, got {maxval}", offset=pos - 1)

    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    expected = width * height * dtype.itemsize
    raster = data[pos:pos + expected]
    if len(raster) != expected:
        raise ParseError(
            f"PGM raster truncated: expected {expected} bytes, found {len(raster)}",
            offset=pos + len(raster),
        )
    if len(data) != pos + expected:
        raise ParseError("Trailing bytes after PGM raster", offset=pos + expected)

    array = np.frombuffer(raster, dtype=dtype).reshape(height, width)
    if array.max() > maxval:
        raise ParseError(f"PGM sample exceeds maxval {maxval}", offset=pos)
    return array.astype(np.uint16 if maxval > 255 else np.uint8), maxval


def encode(array: np.ndarray, maxval: int = 255) -> bytes:
    """Encode an H x W integer array as P5 bytes"""
    height, width = array.shape
    header = b"P5\n%d %d\n%d\n" % (width, height, maxval)
    dtype = ">u2" if maxval > 255 else "u1"
    return header + np.ascontiguousarray(array, dtype=dtype).tobytes()


def read(path: PathLike) -> Tuple[np.ndarray, int]:
    try:
        with open(path, "rb") as handle:
            data = handle.read()
    except OSError as e:
        raise DataIOError(f"Cannot read PGM file '{path}': {e.strerror or e}")
    try:
        return decode(data)
    except ParseError as e:
        error = ParseError(f"{path}: {e.message}")
        error.offset = e.offset
        raise error


def write(path: PathLike, array: np.ndarray, maxval: int = 255):
    directory = os.path.dirname(os.fspath(path))
    if directory:
        os.makedirs(directory, exist_ok=True)
    try:
        with open(path, "wb") as handle:
            handle.write(encode(array, maxval))
    except OSError as e:
        raise DataIOError(f"Cannot write PGM file '{path}': {e.strerror or e}")
