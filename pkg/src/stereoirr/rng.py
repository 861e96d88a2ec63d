"""Deterministic, splittable random streams.

Every source of randomness in the package flows through :class:`RngState`,
a (seed, counter) pair. Drawing spawns a counter-based Philox generator
keyed by a hash of (seed, counter), so distinct counters give independent
streams and the whole state is two integers, trivial to checkpoint.

`split(label)` derives an independent child stream, which is how parameter
initialization and data augmentation stay decoupled: advancing one never
perturbs the other.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

_MASK64 = (1 << 64) - 1


def _splitmix64(z: int) -> int:
    """One round of the splitmix64 finalizer; good avalanche for key mixing."""
    z = (z + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


def mix_key(*parts) -> int:
    """Hash arbitrary ints/strings to a stable 64-bit Philox key."""
    h = hashlib.blake2b(digest_size=8)
    for p in parts:
        if isinstance(p, str):
            h.update(b"s:" + p.encode("utf-8"))
        else:
            h.update(b"i:" + int(p).to_bytes(16, "little", signed=True))
        h.update(b"\x00")
    return int.from_bytes(h.digest(), "little")


@dataclass
class RngState:
    """Checkpointable random-stream state: same (seed, counter) ⇒ same draws."""

    seed: int
    counter: int = 0

    def spawn(self) -> np.random.Generator:
        """Return a fresh generator for the current counter, then advance."""
        key = _splitmix64(mix_key(self.seed, self.counter))
        self.counter += 1
        return np.random.Generator(np.random.Philox(key=key))

    def split(self, label: str) -> "RngState":
        """Derive an independent named child stream (counter starts at 0)."""
        return RngState(seed=mix_key(self.seed, "split", label), counter=0)

    def copy(self) -> "RngState":
        return RngState(self.seed, self.counter)


def stream(seed: int, *labels) -> np.random.Generator:
    """Stateless generator for (seed, labels); used for per-epoch draws so a
    resumed run replays exactly the same shuffles and crops."""
    return np.random.Generator(np.random.Philox(key=mix_key(seed, *labels)))
