"""Splittable deterministic random streams.

Every stochastic piece of the lab (parameter init, corpus generation,
epoch shuffling) draws from a stream derived from a single 64-bit seed
via a counter-based mix. Deriving ``child(i)`` is a pure function of
``(seed, i)``, so records can be generated in parallel, or in any order,
without changing a single byte of the output.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def splitmix64(x: int) -> int:
    """One round of the splitmix64 mixing function (public domain)."""
    x = (x + _GOLDEN) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


@dataclass(frozen=True)
class SplitRng:
    """A node in a tree of independent random streams.

    ``seed`` is the derived 64-bit state; ``path`` records how this node
    was reached from the root (useful for debugging reproducibility
    issues, never consumed by the math).
    """

    seed: int
    path: tuple[int, ...] = field(default=())

    def __post_init__(self) -> None:
        object.__setattr__(self, "seed", self.seed & _MASK64)

    def child(self, index: int) -> "SplitRng":
        """Derive the ``index``-th child stream. Pure in (seed, index)."""
        if index < 0:
            raise ValueError(f"child index must be non-negative, got {index}")
        derived = splitmix64(self.seed ^ splitmix64(index & _MASK64))
        return SplitRng(derived, self.path + (index,))

    def generator(self) -> np.random.Generator:
        """A fresh numpy Generator seeded from this node's state."""
        return np.random.default_rng(self.seed)


def hash_id(record_id: int, salt: int = 0) -> float:
    """Map an integer id to a deterministic uniform in [0, 1).

    Used for order-independent train/dev splitting.
    """
    return splitmix64((record_id & _MASK64) ^ splitmix64(salt)) / 2.0**64
