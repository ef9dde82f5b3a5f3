"""Binary model checkpoints.

Layout (all integers little-endian)::

    magic        8 bytes  b"HGNNCKPT"
    version      u16
    d_in, d      u32, u32
    adapter      u8       0/1
    operator     u8       0 inner product, 1 concat MLP, 2 subtract MLP
    depth        u16
    slope        f64
    squared      u8       squared (1) or plain (0) Euclidean distance
    variant      u8       index into Variant
    n_blocks     u32
    n_blocks x:  name_len u16, name utf-8, ndim u8, dims u32*ndim, values f64*prod(dims)

Blocks are written in sorted name order, so equal models give equal bytes.
"""
from __future__ import annotations

import io
import os
import struct

import numpy as np

from .graph import AdjacencyKind
from .models import HGNNModel, ModelConfig, Variant

MAGIC = b"HGNNCKPT"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<8sHIIBBHdBBI")
_OPERATORS = list(AdjacencyKind)
_VARIANTS = list(Variant)


class CheckpointError(ValueError):
    """Checkpoint is corrupt, truncated or from an unsupported format version."""


def to_bytes(model: HGNNModel) -> bytes:
    cfg = model.config
    named = model.named_params()
    buf = io.BytesIO()
    buf.write(_HEADER.pack(MAGIC, FORMAT_VERSION, cfg.d_in, cfg.d, int(cfg.adapter),
                           _OPERATORS.index(cfg.operator), cfg.depth, cfg.slope,
                           int(cfg.squared_distance), _VARIANTS.index(cfg.variant), len(named)))
    for name in sorted(named):
        values = named[name].values
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack(f"<B{values.ndim}I", values.ndim, *values.shape))
        buf.write(values.astype("<f8").tobytes())
    return buf.getvalue()


def save_checkpoint(model: HGNNModel, path: str | os.PathLike) -> None:
    with open(path, "wb") as fh:
        fh.write(to_bytes(model))


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def read(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise CheckpointError("checkpoint is truncated")
        out = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return out

    def raw(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint is truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out


def from_bytes(data: bytes) -> HGNNModel:
    if len(data) < _HEADER.size or data[:8] != MAGIC:
        raise CheckpointError("not an HGNN checkpoint (bad magic)")
    reader = _Reader(data)
    (_, version, d_in, d, adapter, op, depth, slope, squared, variant,
     n_blocks) = reader.read(_HEADER.format)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
    if op >= len(_OPERATORS) or variant >= len(_VARIANTS):
        raise CheckpointError("checkpoint header has an unknown operator or variant code")
    blocks = {}
    for _ in range(n_blocks):
        (name_len,) = reader.read("<H")
        name = reader.raw(name_len).decode("utf-8")
        (ndim,) = reader.read("<B")
        shape = reader.read(f"<{ndim}I")
        count = int(np.prod(shape)) if ndim else 1
        values = np.frombuffer(reader.raw(8 * count), dtype="<f8").reshape(shape)
        blocks[name] = values.astype(np.float64)
    if reader.pos != len(data):
        raise CheckpointError("trailing bytes after the last parameter block")
    n_way = blocks["baseline.w"].shape[1] if "baseline.w" in blocks else 5
    try:
        cfg = ModelConfig(d_in=d_in, d=d, adapter=bool(adapter), operator=_OPERATORS[op],
                          depth=depth, slope=slope, squared_distance=bool(squared),
                          variant=_VARIANTS[variant], n_way=n_way)
    except ValueError as exc:
        raise CheckpointError(f"inconsistent checkpoint header: {exc}") from exc
    model = HGNNModel.create(cfg)
    named = model.named_params()
    if set(named) != set(blocks):
        missing = sorted(set(named) - set(blocks))
        extra = sorted(set(blocks) - set(named))
        raise CheckpointError(f"parameter blocks do not match the header (missing {missing}, extra {extra})")
    for name, p in named.items():
        if blocks[name].shape != p.shape:
            raise CheckpointError(f"block {name} has shape {blocks[name].shape}, expected {p.shape}")
        p.values[...] = blocks[name]
    return model


def load_checkpoint(path: str | os.PathLike) -> HGNNModel:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
