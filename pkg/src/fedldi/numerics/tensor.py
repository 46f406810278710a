"""Dense storage types: 2-D float64 arrays and flat parameter vectors."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from math import prod

import numpy as np

from ..errors import ShapeError, ValidationError

Layout = tuple  # tuple[tuple[str, tuple[int, ...]], ...]


def tensor2(data, name="tensor") -> np.ndarray:
    """Validate and return ``data`` as a C-contiguous finite float64 matrix."""
    arr = np.ascontiguousarray(data, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains non-finite entries")
    return arr


def _normalize_layout(layout) -> Layout:
    out = []
    seen = set()
    for name, shape in layout:
        shape = tuple(int(s) for s in shape)
        if name in seen:
            raise ShapeError(f"duplicate layout entry {name!r}")
        if any(s < 0 for s in shape):
            raise ShapeError(f"negative dimension in {name!r}")
        seen.add(name)
        out.append((str(name), shape))
    return tuple(out)


@dataclass
class ParameterVector:
    """Named, shaped blocks packed into one flat float64 array."""

    layout: Layout
    values: np.ndarray

    def __post_init__(self):
        self.layout = _normalize_layout(self.layout)
        self.values = np.ascontiguousarray(self.values, dtype=np.float64).reshape(-1)
        expected = sum(prod(shape) for _, shape in self.layout)
        if self.values.size != expected:
            raise ShapeError(f"layout needs {expected} values, got {self.values.size}")

    @classmethod
    def zeros(cls, layout) -> "ParameterVector":
        layout = _normalize_layout(layout)
        return cls(layout, np.zeros(sum(prod(s) for _, s in layout)))

    @classmethod
    def flatten(cls, blocks: dict, layout=None) -> "ParameterVector":
        if layout is None:
            layout = [(k, np.shape(v)) for k, v in blocks.items()]
        layout = _normalize_layout(layout)
        parts = []
        for name, shape in layout:
            block = np.asarray(blocks[name], dtype=np.float64)
            if block.shape != shape:
                raise ShapeError(f"block {name!r} has shape {block.shape}, layout says {shape}")
            parts.append(block.reshape(-1))
        values = np.concatenate(parts) if parts else np.zeros(0)
        return cls(layout, values)

    def unflatten(self) -> dict:
        """Views into ``values`` keyed by block name (writes go through)."""
        out = {}
        offset = 0
        for name, shape in self.layout:
            n = prod(shape)
            out[name] = self.values[offset:offset + n].reshape(shape)
            offset += n
        return out

    def offsets(self) -> dict:
        out = {}
        offset = 0
        for name, shape in self.layout:
            n = prod(shape)
            out[name] = (offset, offset + n)
            offset += n
        return out

    def copy(self) -> "ParameterVector":
        return ParameterVector(self.layout, self.values.copy())

    def with_values(self, values) -> "ParameterVector":
        return ParameterVector(self.layout, values)

    def check_same_layout(self, other: "ParameterVector"):
        if self.layout != other.layout:
            raise ShapeError("parameter layouts differ")

    def layout_hash(self) -> str:
        payload = json.dumps([[n, list(s)] for n, s in self.layout], separators=(",", ":"))
        return hashlib.sha256(payload.encode()).hexdigest()

    def __len__(self):
        return self.values.size

    def __eq__(self, other):
        if not isinstance(other, ParameterVector):
            return NotImplemented
        return self.layout == other.layout and np.array_equal(self.values, other.values)


def grad_l2_norm(g) -> float:
    """Euclidean norm of a gradient (ParameterVector or array)."""
    v = g.values if isinstance(g, ParameterVector) else np.asarray(g, dtype=np.float64)
    return float(np.sqrt(np.dot(v.ravel(), v.ravel())))
