"""Binary weight file format.

Layout (little-endian):
  magic "TFWT" (4 bytes)
  format version, u32 = 1
  config: n_layers, n_heads, n_kv_heads, head_dim, d_ff, vocab_size,
          max_seq as u32, then rope_theta, norm_eps as f32
  tied-head flag, u8
  one record per tensor, in the fixed order given by model.tensor_order:
      name length u16, UTF-8 name, rank u8, each dim u32, raw f32 payload

The round trip is bit-exact.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import BadMagicError, TruncatedFileError, VersionError, WeightFormatError
from .model import ModelConfig, ModelWeights, tensor_order

MAGIC = b"TFWT"
VERSION = 1
_CONFIG_INTS = ("n_layers", "n_heads", "n_kv_heads", "head_dim", "d_ff", "vocab_size", "max_seq")
_CONFIG_REALS = ("rope_theta", "norm_eps")


def save_weights(weights: ModelWeights, path) -> None:
    weights.validate()
    cfg = weights.config
    buf = bytearray()
    buf += MAGIC
    buf += struct.pack("<I", VERSION)
    buf += struct.pack("<7I", *(getattr(cfg, n) for n in _CONFIG_INTS))
    buf += struct.pack("<2f", *(getattr(cfg, n) for n in _CONFIG_REALS))
    buf += struct.pack("<B", 1 if weights.tied_head else 0)
    for name, _ in tensor_order(cfg, weights.tied_head):
        t = np.ascontiguousarray(weights.tensors[name], dtype=np.float32)
        raw = name.encode()
        buf += struct.pack("<H", len(raw)) + raw
        buf += struct.pack("<B", t.ndim)
        buf += struct.pack(f"<{t.ndim}I", *t.shape)
        buf += t.tobytes()
    Path(path).write_bytes(bytes(buf))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.off = 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.data):
            raise TruncatedFileError(f"file ended at byte {len(self.data)}, needed {self.off + n}")
        out = self.data[self.off:self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_weights(path) -> ModelWeights:
    r = _Reader(Path(path).read_bytes())
    if r.take(4) != MAGIC:
        raise BadMagicError(f"{path}: bad magic")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise VersionError(f"{path}: unsupported format version {version}")
    ints = r.unpack("<7I")
    reals = r.unpack("<2f")
    (tied,) = r.unpack("<B")
    try:
        cfg = ModelConfig(**dict(zip(_CONFIG_INTS, ints)), **dict(zip(_CONFIG_REALS, reals)))
    except ValueError as e:
        raise WeightFormatError(f"{path}: invalid config: {e}") from None
    tensors = {}
    for name, shape in tensor_order(cfg, bool(tied)):
        (nlen,) = r.unpack("<H")
        got = r.take(nlen).decode()
        if got != name:
            raise WeightFormatError(f"{path}: tensor {got!r} where {name!r} expected")
        (rank,) = r.unpack("<B")
        dims = r.unpack(f"<{rank}I") if rank else ()
        if dims != shape:
            raise WeightFormatError(f"{path}: {name} has dims {dims}, config implies {shape}")
        count = int(np.prod(dims)) if dims else 1
        payload = r.take(4 * count)
        tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
    if r.off != len(r.data):
        raise WeightFormatError(f"{path}: {len(r.data) - r.off} trailing bytes")
    return ModelWeights(cfg, tensors, bool(tied)).validate()
