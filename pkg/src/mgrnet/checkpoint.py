"""Binary parameter checkpoints.

Layout: the 8-byte magic ``MGRNET01`` followed by one record per parameter::

    u32 name_len | name (utf-8) | u32 rank | u32 extent * rank | f32 values

All integers and floats are little-endian; records run to end of file.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping, Union

import numpy as np

from .errors import BadMagicError, PayloadMismatchError
from .tensor import Tensor

MAGIC = b"MGRNET01"


def save_checkpoint(path: Union[str, Path], params: Mapping[str, Union[Tensor, np.ndarray]]) -> None:
    chunks = [MAGIC]
    for name, value in params.items():
        arr = value.data if isinstance(value, Tensor) else np.asarray(value)
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path: Union[str, Path]) -> dict[str, np.ndarray]:
    """Read every record; values come back as float32 arrays in file order."""
    blob = Path(path).read_bytes()
    if blob[:8] != MAGIC:
        raise BadMagicError(f"{path}: not a checkpoint (magic {blob[:8]!r})")
    out: dict[str, np.ndarray] = {}
    pos = 8
    try:
        while pos < len(blob):
            (name_len,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos:pos + name_len].decode("utf-8")
            if len(name.encode("utf-8")) != name_len:
                raise PayloadMismatchError(f"{path}: truncated parameter name")
            pos += name_len
            (rank,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
            count = int(np.prod(shape)) if rank else 1
            if pos + 4 * count > len(blob):
                raise PayloadMismatchError(f"{path}: payload for {name!r} is truncated")
            out[name] = np.frombuffer(blob, dtype="<f4", count=count, offset=pos).reshape(shape).astype(np.float32)
            pos += 4 * count
    except struct.error as exc:
        raise PayloadMismatchError(f"{path}: truncated record ({exc})") from None
    return out
