"""Binary container of named float64 matrices.

Layout (little-endian)::

    b"DDGC"  u32 version  u32 count
    count x { u32 name_len, name utf-8, u32 rows, u32 cols, rows*cols f64 row-major }

Entries are written in sorted name order so equal parameter sets give
byte-identical files.
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"DDGC"
VERSION = 1


class CheckpointError(ValueError):
    """File is not a valid checkpoint, or does not fit the model."""


def save_checkpoint(path, params: Mapping[str, np.ndarray]) -> None:
    chunks = [MAGIC, struct.pack("<II", VERSION, len(params))]
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f8")
        if arr.ndim != 2:
            raise CheckpointError(f"parameter {name!r} is not a matrix")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw + struct.pack("<II", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path, expected: Mapping[str, tuple[int, int]] | None = None) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError(f"truncated checkpoint at byte {pos}")
        out = data[pos : pos + n]
        pos += n
        return out

    if take(4) != MAGIC:
        raise CheckpointError("bad checkpoint magic at byte 0")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} at byte 4")
    params = {}
    for _ in range(count):
        (n,) = struct.unpack("<I", take(4))
        name = take(n).decode("utf-8")
        rows, cols = struct.unpack("<II", take(8))
        params[name] = np.frombuffer(take(8 * rows * cols), dtype="<f8").reshape(rows, cols).astype(np.float64)
    if pos != len(data):
        raise CheckpointError(f"trailing bytes after checkpoint at byte {pos}")
    if expected is not None:
        if set(expected) != set(params):
            missing = sorted(set(expected) - set(params))
            extra = sorted(set(params) - set(expected))
            raise CheckpointError(f"checkpoint does not fit model: missing {missing}, unexpected {extra}")
        for name, shape in expected.items():
            if params[name].shape != tuple(shape):
                raise CheckpointError(f"{name}: shape {params[name].shape} != expected {tuple(shape)}")
    return params
