"""PRM1 parameter checkpoints.

Layout (little-endian)::

    b"PRM1"
    uint32 len | utf-8 block name          (e.g. "adapter", "mil:gated_attention")
    uint32 tensor count
    per tensor, sorted by name:
        uint32 len | utf-8 tensor name
        uint32 rows | uint32 cols | rows*cols float32   (EMB1 payload layout)

Vectors are stored as 1 x n. Values are rounded to float32 on save.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from ..dataset import encode_matrix
from ..errors import EmbeddingFormatError, FileIOError, TruncatedFileError

PRM_MAGIC = b"PRM1"
_U32 = struct.Struct("<I")


def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return _U32.pack(len(b)) + b


def encode_params(block: str, tensors: dict) -> bytes:
    parts = [PRM_MAGIC, _pack_str(block), _U32.pack(len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype=np.float64)
        if arr.ndim == 1:
            arr = arr[None, :]
        elif arr.ndim == 0:
            arr = arr.reshape(1, 1)
        parts.append(_pack_str(name))
        parts.append(encode_matrix(arr))
    return b"".join(parts)


def save_params(path, block: str, tensors: dict) -> Path:
    path = Path(path)
    try:
        path.write_bytes(encode_params(block, tensors))
    except OSError as exc:
        raise FileIOError(f"cannot write checkpoint ({exc.strerror})", path) from exc
    return path


class _Reader:
    def __init__(self, data, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n):
        if self.pos + n > len(self.data):
            raise TruncatedFileError("checkpoint ends early", self.path)
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self):
        return _U32.unpack(self.take(4))[0]

    def string(self):
        return self.take(self.u32()).decode("utf-8")


def load_params(path):
    """Return ``(block_name, {tensor_name: float64 array of shape (rows, cols)})``."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise FileIOError(f"cannot read checkpoint ({exc.strerror})", path) from exc
    r = _Reader(data, path)
    if r.take(4) != PRM_MAGIC:
        raise EmbeddingFormatError("bad magic, expected b'PRM1'", path)
    block = r.string()
    tensors = {}
    for _ in range(r.u32()):
        name = r.string()
        rows, cols = r.u32(), r.u32()
        raw = r.take(4 * rows * cols)
        tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(rows, cols).astype(np.float64)
    if r.pos != len(data):
        raise EmbeddingFormatError("trailing bytes after last tensor", path)
    return block, tensors
