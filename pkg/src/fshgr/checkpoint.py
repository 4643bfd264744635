"""FSH1 parameter checkpoints.

Layout (little-endian)::

    b"FSH1"
    repeated until EOF:
        u32 name_len, name (utf-8), u32 rank, u32 dims[rank],
        float32 payload (row-major, prod(dims) values)
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import FormatError
from .tensor import Tensor

MAGIC = b"FSH1"

__all__ = ["save_checkpoint", "load_checkpoint", "MAGIC"]


def save_checkpoint(path, params: Mapping[str, Tensor | np.ndarray]) -> None:
    chunks = [MAGIC]
    for name, value in params.items():
        arr = value.data if isinstance(value, Tensor) else np.asarray(value)
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path, requires_grad: bool = True) -> dict[str, Tensor]:
    """Read an FSH1 file into an ordered ``name -> Tensor`` dict (float32)."""
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}", offset=0, path=path)
    out = {}
    pos = 4

    def take(n, what):
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(f"truncated {what}: need {n} bytes, {len(buf) - pos} left", offset=pos, path=path)
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    while pos < len(buf):
        (name_len,) = struct.unpack("<I", take(4, "name length"))
        name = take(name_len, "tensor name").decode("utf-8")
        (rank,) = struct.unpack("<I", take(4, "rank"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, "dims"))
        count = int(np.prod(dims)) if rank else 1
        payload = take(4 * count, f"payload of {name!r}")
        arr = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(dims)
        if name in out:
            raise FormatError(f"duplicate tensor name {name!r}", offset=pos, path=path)
        out[name] = Tensor(arr, requires_grad=requires_grad)
    return out
