"""Versioned binary checkpoint container.

Byte layout (all integers little-endian)::

    offset   size  field
    0        8     magic  b"POFCKPT\\0"
    8        4     uint32 format version (currently 1)
    12       4     uint32 header length H in bytes
    16       H     UTF-8 JSON header, keys sorted, no whitespace:
                   {"layout": [[layer_id, [rows, cols]], ...],
                    "meta": {...}, "mlp": {...}, "rng_label": str,
                    "split": {"classifier_block_ids": [...],
                              "feature_block_ids": [...]}}
    16+H     8     uint64 number of parameter values N
    24+H     8*N   float64 parameter values (IEEE-754, little-endian)

Writing then reading a checkpoint reproduces every value bit-for-bit.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .nn import MlpSpec
from .params import ModelSplit, ParamVector, make_layout

MAGIC = b"POFCKPT\x00"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    params: ParamVector
    spec: MlpSpec
    split: ModelSplit
    rng_label: str = ""
    meta: dict = field(default_factory=dict)

    def header(self) -> dict:
        return {
            "layout": [[b.layer_id, list(b.shape)] for b in self.params.layout],
            "meta": self.meta,
            "mlp": self.spec.to_dict(),
            "rng_label": self.rng_label,
            "split": self.split.to_dict(),
        }

    def to_bytes(self) -> bytes:
        header = json.dumps(self.header(), sort_keys=True, separators=(",", ":")).encode("utf-8")
        values = self.params.values.astype("<f8", copy=False)
        return b"".join([
            MAGIC,
            struct.pack("<II", VERSION, len(header)),
            header,
            struct.pack("<Q", values.size),
            values.tobytes(),
        ])

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        if data[:8] != MAGIC:
            raise CheckpointError("not a checkpoint file (bad magic)")
        version, hlen = struct.unpack_from("<II", data, 8)
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        header = json.loads(data[16:16 + hlen].decode("utf-8"))
        (n,) = struct.unpack_from("<Q", data, 16 + hlen)
        start = 24 + hlen
        if len(data) != start + 8 * n:
            raise CheckpointError(
                f"truncated checkpoint: expected {start + 8 * n} bytes, got {len(data)}")
        values = np.frombuffer(data, dtype="<f8", count=n, offset=start).astype(np.float64)
        layout = make_layout([(lid, tuple(shape)) for lid, shape in header["layout"]])
        spec = MlpSpec.from_dict(header["mlp"])
        split = ModelSplit.from_dict(header["split"])
        params = ParamVector(values, layout)
        if layout != spec.layout():
            raise CheckpointError("checkpoint layout does not match its MLP spec")
        split.validate(spec.layer_ids)
        return cls(params, spec, split, header["rng_label"], header["meta"])

    def save(self, path) -> Path:
        path = Path(path)
        path.write_bytes(self.to_bytes())
        return path

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())
