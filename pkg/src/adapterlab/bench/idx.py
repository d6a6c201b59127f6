"""Reader and writer for the IDX binary tensor format (MNIST-style files).

Layout: two zero bytes, a type code (0x08 = unsigned byte), the number of
dimensions, then one big-endian u32 per dimension, then the payload.
"""

from __future__ import annotations

import os
import struct

import numpy as np

from ..exceptions import (
    IdxCountMismatchError,
    IdxLabelRangeError,
    IdxMagicError,
    IdxTruncatedError,
)
from .data import Dataset

IMAGES_MAGIC = b"\x00\x00\x08\x03"
LABELS_MAGIC = b"\x00\x00\x08\x01"


def _read_u8_tensor(path, magic, ndim):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4 or raw[:4] != magic:
        raise IdxMagicError(f"{path}: bad magic {raw[:4].hex()}, expected {magic.hex()}")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxTruncatedError(path, header, len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    expected = header + int(np.prod(dims, dtype=np.int64))
    if len(raw) != expected:
        if len(raw) < expected:
            raise IdxTruncatedError(path, expected, len(raw))
        raise IdxMagicError(f"{path}: {len(raw) - expected} trailing bytes after payload")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(images_path, labels_path, n_classes: int = 10, name: str | None = None) -> Dataset:
    """Load an image/label IDX pair as flattened inputs scaled to [0, 1]."""
    images = _read_u8_tensor(images_path, IMAGES_MAGIC, 3)
    labels = _read_u8_tensor(labels_path, LABELS_MAGIC, 1)
    if images.shape[0] != labels.shape[0]:
        raise IdxCountMismatchError(
            f"{images_path} holds {images.shape[0]} images but {labels_path} "
            f"holds {labels.shape[0]} labels"
        )
    if labels.size and int(labels.max()) >= n_classes:
        raise IdxLabelRangeError(
            f"{labels_path}: label {int(labels.max())} out of range for {n_classes} classes"
        )
    inputs = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    name = name or os.path.splitext(os.path.basename(os.fspath(images_path)))[0]
    return Dataset(name, inputs, labels.astype(np.int64), n_classes)


def write_idx(path, array) -> None:
    """Write a uint8 array (1-D labels or 3-D images) in IDX format."""
    a = np.ascontiguousarray(array, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(b"\x00\x00\x08" + bytes([a.ndim]))
        fh.write(struct.pack(f">{a.ndim}I", *a.shape))
        fh.write(a.tobytes())
