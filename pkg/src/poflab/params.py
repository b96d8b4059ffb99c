"""Flat, layer-blocked parameter storage and the feature/classifier split."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np


class LayoutError(ValueError):
    """Raised when a parameter layout, block reference or split is inconsistent."""


@dataclass(frozen=True)
class Block:
    layer_id: str
    shape: tuple[int, ...]
    offset: int
    length: int


def make_layout(shapes: Sequence[tuple[str, tuple[int, ...]]]) -> tuple[Block, ...]:
    """Build a contiguous layout from ``(layer_id, shape)`` pairs."""
    blocks = []
    offset = 0
    seen = set()
    for layer_id, shape in shapes:
        if layer_id in seen:
            raise LayoutError(f"duplicate layer id {layer_id!r}")
        seen.add(layer_id)
        length = int(np.prod(shape))
        blocks.append(Block(layer_id, tuple(int(s) for s in shape), offset, length))
        offset += length
    return tuple(blocks)


class ParamVector:
    """All model parameters as one float64 vector partitioned into layer blocks.

    Each block is a contiguous slice of ``values``; :meth:`view` returns a
    reshaped numpy view (no copy) of one block.
    """

    __slots__ = ("values", "layout", "_index")

    def __init__(self, values: np.ndarray, layout: Sequence[Block]):
        values = np.ascontiguousarray(values, dtype=np.float64)
        if values.ndim != 1:
            raise LayoutError("parameter values must be a 1-D vector")
        layout = tuple(layout)
        offset = 0
        for b in layout:
            if b.offset != offset or b.length != int(np.prod(b.shape)):
                raise LayoutError(f"block {b.layer_id!r} is not contiguous with its predecessor")
            offset += b.length
        if offset != values.size:
            raise LayoutError(
                f"layout covers {offset} entries but vector has {values.size}")
        self.values = values
        self.layout = layout
        self._index = {b.layer_id: b for b in layout}

    def __len__(self) -> int:
        return self.values.size

    def __repr__(self) -> str:
        ids = ", ".join(b.layer_id for b in self.layout)
        return f"ParamVector(n={self.values.size}, blocks=[{ids}])"

    @property
    def layer_ids(self) -> tuple[str, ...]:
        return tuple(b.layer_id for b in self.layout)

    def block(self, layer_id: str) -> Block:
        try:
            return self._index[layer_id]
        except KeyError:
            raise LayoutError(f"unknown layer id {layer_id!r}") from None

    def block_slice(self, layer_id: str) -> slice:
        b = self.block(layer_id)
        return slice(b.offset, b.offset + b.length)

    def view(self, layer_id: str) -> np.ndarray:
        b = self.block(layer_id)
        return self.values[b.offset:b.offset + b.length].reshape(b.shape)

    def views(self) -> dict[str, np.ndarray]:
        return {b.layer_id: self.view(b.layer_id) for b in self.layout}

    def mask(self, layer_ids: Iterable[str]) -> np.ndarray:
        """Boolean mask over ``values`` selecting the named blocks."""
        m = np.zeros(self.values.size, dtype=bool)
        for lid in layer_ids:
            m[self.block_slice(lid)] = True
        return m

    def indices(self, layer_ids: Iterable[str]) -> np.ndarray:
        return np.flatnonzero(self.mask(layer_ids))

    def with_values(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(values, self.layout)

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.layout)

    def zeros_like(self) -> "ParamVector":
        return ParamVector(np.zeros_like(self.values), self.layout)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.values)))

    @classmethod
    def from_views(cls, views: Mapping[str, np.ndarray], layout: Sequence[Block]) -> "ParamVector":
        values = np.empty(sum(b.length for b in layout), dtype=np.float64)
        for b in layout:
            arr = np.asarray(views[b.layer_id], dtype=np.float64)
            if arr.shape != b.shape:
                raise LayoutError(
                    f"block {b.layer_id!r}: expected shape {b.shape}, got {arr.shape}")
            values[b.offset:b.offset + b.length] = arr.ravel()
        return cls(values, layout)

    def equals(self, other: "ParamVector") -> bool:
        """Bit-exact comparison of layout and values."""
        return (self.layout == other.layout
                and self.values.tobytes() == other.values.tobytes())


@dataclass(frozen=True)
class ModelSplit:
    """Partition of layer ids into feature extractor and classifier (a suffix)."""

    feature_block_ids: tuple[str, ...]
    classifier_block_ids: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "feature_block_ids", tuple(self.feature_block_ids))
        object.__setattr__(self, "classifier_block_ids", tuple(self.classifier_block_ids))

    @classmethod
    def suffix(cls, layer_ids: Sequence[str], n_classifier: int = 1) -> "ModelSplit":
        layer_ids = tuple(layer_ids)
        if not 1 <= n_classifier < len(layer_ids):
            raise LayoutError(
                f"classifier must hold between 1 and {len(layer_ids) - 1} layers, got {n_classifier}")
        return cls(layer_ids[:-n_classifier], layer_ids[-n_classifier:])

    def validate(self, layer_ids: Sequence[str]) -> None:
        layer_ids = tuple(layer_ids)
        phi, theta = self.feature_block_ids, self.classifier_block_ids
        if set(phi) & set(theta):
            raise LayoutError(f"split blocks overlap: {sorted(set(phi) & set(theta))}")
        if phi + theta != layer_ids:
            raise LayoutError(
                f"split {phi} | {theta} is not an ordered partition of {layer_ids}")
        if not theta:
            raise LayoutError("classifier block list is empty")

    def select(self, wrt: str) -> tuple[str, ...]:
        """Layer ids for a selector: ``all``, ``phi`` or ``theta``."""
        if wrt == "all":
            return self.feature_block_ids + self.classifier_block_ids
        if wrt == "phi":
            return self.feature_block_ids
        if wrt == "theta":
            return self.classifier_block_ids
        raise ValueError(f"unknown block selector {wrt!r}; expected all, phi or theta")

    def to_dict(self) -> dict:
        return {"feature_block_ids": list(self.feature_block_ids),
                "classifier_block_ids": list(self.classifier_block_ids)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelSplit":
        return cls(tuple(d["feature_block_ids"]), tuple(d["classifier_block_ids"]))
