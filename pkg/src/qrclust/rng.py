"""Deterministic, splittable random-number streams.

Every stochastic routine in the package draws from a stream derived from a
single master seed plus a path of labels, e.g.::

    root = Stream(20240901)
    rng = root.child("rep", 17, "boot", 3).generator()

Child derivation is a pure function of (seed, path): the stream for
replication 17 / bootstrap replicate 3 is identical no matter how many
worker processes run, in what order they run, or whether sibling streams
were ever instantiated.  That property is what makes simulation output
byte-identical across thread counts.

Streams are backed by the counter-based Philox bit generator keyed through
``numpy.random.SeedSequence`` spawn keys; string labels are folded to
32-bit integers with CRC-32 so paths may mix tags and indices.
"""

from __future__ import annotations

import zlib

import numpy as np

__all__ = ["Stream"]


def _label_to_int(label) -> int:
    if isinstance(label, str):
        return zlib.crc32(label.encode("utf-8")) & 0xFFFFFFFF
    value = int(label)
    if value < 0:
        raise ValueError(f"stream path labels must be non-negative, got {label!r}")
    return value


class Stream:
    """Handle for one reproducible random stream.

    Immutable; ``child`` returns a new handle with the extended path and
    ``generator`` materializes the ``numpy.random.Generator``.
    """

    __slots__ = ("seed", "path")

    def __init__(self, seed: int, path: tuple[int, ...] = ()):
        if not 0 <= int(seed) < 2**63:
            raise ValueError("seed must be a non-negative 63-bit integer")
        self.seed = int(seed)
        self.path = tuple(_label_to_int(p) for p in path)

    def child(self, *labels) -> "Stream":
        return Stream(self.seed, self.path + tuple(labels))

    def generator(self) -> np.random.Generator:
        seq = np.random.SeedSequence(self.seed, spawn_key=self.path)
        return np.random.Generator(np.random.Philox(seq))

    def __repr__(self):
        return f"Stream(seed={self.seed}, path={self.path})"

    def __eq__(self, other):
        return (
            isinstance(other, Stream)
            and self.seed == other.seed
            and self.path == other.path
        )

    def __hash__(self):
        return hash((self.seed, self.path))
