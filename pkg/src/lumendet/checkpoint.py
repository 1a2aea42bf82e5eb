"""Binary checkpoint archive for named float32 arrays.

Layout: the 5-byte magic ``LMDT1`` followed by one record per array.
Each record is a little-endian u32 name length, the UTF-8 name, a u32
rank, one u32 per dimension, then the row-major float32 payload.
Records are read back until end of file, so the set of arrays is
self-describing and needs no trailing index.

Text metadata (config files, notes) rides along as float32 arrays of
byte values under ``meta/`` names, keeping the format single-typed.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"LMDT1"
META_PREFIX = "meta/"


class CheckpointError(ValueError):
    """Raised when a checkpoint file is malformed."""


def save_arrays(path, arrays: dict[str, np.ndarray]) -> None:
    """Write named arrays to ``path``. Values are cast to float32."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        for name, arr in arrays.items():
            data = np.asarray(arr, dtype=np.float32)
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", data.ndim))
            for dim in data.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(data.tobytes(order="C"))


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError(
            f"truncated checkpoint: wanted {n} bytes for {what}, got {len(buf)}")
    return buf


def load_arrays(path) -> dict[str, np.ndarray]:
    """Read every record from ``path``. Inverse of :func:`save_arrays`."""
    path = Path(path)
    arrays: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointError(
                f"bad magic {magic!r} in '{path}', expected {MAGIC!r}")
        while True:
            head = fh.read(4)
            if head == b"":
                break
            if len(head) != 4:
                raise CheckpointError("truncated checkpoint: partial name length")
            (name_len,) = struct.unpack("<I", head)
            name = _read_exact(fh, name_len, "name").decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(fh, 4, f"rank of '{name}'"))
            shape = tuple(
                struct.unpack("<I", _read_exact(fh, 4, f"dim of '{name}'"))[0]
                for _ in range(rank))
            count = int(np.prod(shape, dtype=np.int64)) if rank else 1
            raw = _read_exact(fh, 4 * count, f"data of '{name}'")
            arrays[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
    return arrays


def encode_text(text: str) -> np.ndarray:
    """Represent UTF-8 text as a 1-D float32 array of byte values."""
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.float32)


def decode_text(arr: np.ndarray) -> str:
    flat = np.asarray(arr).ravel()
    if flat.size and (flat.min() < 0 or flat.max() > 255):
        raise CheckpointError("text array holds values outside byte range")
    if flat.size and np.any(flat != np.rint(flat)):
        raise CheckpointError("text array holds non-integral values")
    return flat.astype(np.uint8).tobytes().decode("utf-8")


def save_model(path, model, meta: dict[str, str] | None = None) -> None:
    """Checkpoint a Module's parameters and buffers plus optional text metadata."""
    arrays = dict(model.named_state())
    for key, text in (meta or {}).items():
        arrays[META_PREFIX + key] = encode_text(text)
    save_arrays(path, arrays)


def load_model(path, model) -> dict[str, str]:
    """Restore a Module in place; returns any text metadata found."""
    arrays = load_arrays(path)
    meta = {}
    state = {}
    for name, arr in arrays.items():
        if name.startswith(META_PREFIX):
            meta[name[len(META_PREFIX):]] = decode_text(arr)
        else:
            state[name] = arr
    model.load_state(state)
    return meta
