"""Seeded, splittable random streams.

Every stream is a Philox counter-based generator keyed by the pair
``(seed, stream_id)``, so the draws of one client never depend on how many
draws another client made or in which order clients were scheduled.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

_MASK64 = (1 << 64) - 1


def _label_bytes(label) -> bytes:
    if isinstance(label, bool):
        raise TypeError("bool is not a valid stream label")
    if isinstance(label, int):
        return b"i" + struct.pack("<q", label) if -(1 << 63) <= label < (1 << 63) else b"I" + str(label).encode()
    if isinstance(label, str):
        return b"s" + label.encode("utf-8")
    raise TypeError(f"unsupported stream label {label!r}")


@dataclass(frozen=True)
class RngStream:
    seed: int
    stream_id: int = 0

    def __post_init__(self):
        if not (0 <= self.seed <= _MASK64 and 0 <= self.stream_id <= _MASK64):
            raise ValueError("seed and stream_id must be unsigned 64-bit integers")

    def generator(self) -> np.random.Generator:
        """A fresh generator positioned at the start of this stream."""
        return np.random.Generator(np.random.Philox(key=(self.seed << 64) | self.stream_id))

    def child(self, *labels) -> "RngStream":
        """Derive an independent stream named by ``labels`` (ints or strings)."""
        h = hashlib.blake2b(digest_size=8)
        h.update(struct.pack("<Q", self.stream_id))
        for label in labels:
            b = _label_bytes(label)
            h.update(struct.pack("<I", len(b)))
            h.update(b)
        return RngStream(self.seed, int.from_bytes(h.digest(), "little"))


def as_generator(rng) -> np.random.Generator:
    """Accept an RngStream, a Generator, or an int seed."""
    if isinstance(rng, RngStream):
        return rng.generator()
    if isinstance(rng, np.random.Generator):
        return rng
    if isinstance(rng, (int, np.integer)):
        return RngStream(int(rng)).generator()
    raise TypeError(f"cannot build a generator from {type(rng).__name__}")
