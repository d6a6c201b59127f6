"""Versioned little-endian checkpoint format.

::

    b"ATCK"  u32 version
    u32 config_len  config_len bytes of UTF-8 ``key=value`` lines
    u32 n_tensors
    per tensor: u32 name_len, name (UTF-8), u32 ndim, ndim x u64 dims,
                float64 payload

The frozen mask is not stored: it is a function of the ``regime`` key.
"""

from __future__ import annotations

import struct

import numpy as np

from ..backbone import EncoderState, ModelConfig
from ..exceptions import (
    CheckpointError,
    CheckpointMagicError,
    CheckpointShapeError,
    CheckpointVersionError,
)
from .config import format_value, parse_model_config

MAGIC = b"ATCK"
VERSION = 1


def encode_checkpoint(state: EncoderState) -> bytes:
    cfg_text = "".join(f"{k}={format_value(v)}\n" for k, v in state.cfg.as_dict().items())
    cfg_bytes = cfg_text.encode("utf-8")
    out = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(cfg_bytes)), cfg_bytes]
    out.append(struct.pack("<I", len(state.params)))
    for name, value in state.params.items():
        nb = name.encode("utf-8")
        arr = np.ascontiguousarray(value, dtype="<f8")
        out.append(struct.pack("<I", len(nb)))
        out.append(nb)
        out.append(struct.pack("<I", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


def save_checkpoint(state: EncoderState, path) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_checkpoint(state))


class _Reader:
    def __init__(self, buf, path):
        self.buf = buf
        self.pos = 0
        self.path = path

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"{self.path}: unexpected end of file at byte {self.pos}")
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_checkpoint(buf: bytes, path="<bytes>") -> EncoderState:
    r = _Reader(buf, path)
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise CheckpointMagicError(f"{path}: not a checkpoint (magic {buf[:4]!r})")
    r.take(4)
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointVersionError(f"{path}: unsupported checkpoint version {version}")
    (cfg_len,) = r.unpack("<I")
    try:
        cfg = parse_model_config(r.take(cfg_len).decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as exc:
        raise CheckpointError(f"{path}: corrupted config block: {exc}") from exc
    (n,) = r.unpack("<I")
    params = {}
    for _ in range(n):
        (name_len,) = r.unpack("<I")
        name = r.take(name_len).decode("utf-8")
        (ndim,) = r.unpack("<I")
        dims = r.unpack(f"<{ndim}Q")
        count = int(np.prod(dims, dtype=np.int64))
        data = np.frombuffer(r.take(8 * count), dtype="<f8").reshape(dims).astype(np.float64)
        params[name] = data
    if r.pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - r.pos} trailing bytes")
    state = EncoderState(cfg, params)
    _check_shapes(state, path)
    return state


def _expected_shapes(cfg: ModelConfig, names) -> dict:
    from ..backbone import init_encoder
    from ..numkernel import make_rng

    ref = init_encoder(cfg, make_rng(0)).params
    shapes = {k: v.shape for k, v in ref.items()}
    d, r = cfg.d, cfg.rank
    for name in names:
        if name.startswith("adapters."):
            leaf = name.rsplit(".", 1)[1]
            known = {"w_down": (r, d), "b_down": (r,), "w_up": (d, r), "b_up": (d,)}
            if leaf in known:
                shapes[name] = known[leaf]
    return shapes


def _check_shapes(state: EncoderState, path):
    expected = _expected_shapes(state.cfg, state.params)
    for name, value in state.params.items():
        if name not in expected:
            raise CheckpointShapeError(f"{path}: unknown tensor {name!r}")
        if value.shape != expected[name]:
            raise CheckpointShapeError(
                f"{path}: tensor {name!r} has shape {value.shape}, config implies {expected[name]}"
            )


def load_checkpoint(path) -> EncoderState:
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read(), path)
