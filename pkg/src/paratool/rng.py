"""Seeded, splittable random streams.

Every stream is a numpy ``Philox`` generator (the counter-based 4x64
Philox-10 bijection).  A stream is addressed by the root seed plus a path of
names; the Philox key is derived from ``blake2b(seed, path)`` so sibling
streams are independent and adding a new consumer never shifts the draws of
an existing one.
"""

from __future__ import annotations

import hashlib

import numpy as np

ALGORITHM = "philox4x64-10"


def _key(seed: int, path: tuple[str, ...]) -> int:
    h = hashlib.blake2b(digest_size=16)
    h.update(int(seed).to_bytes(8, "little", signed=False))
    for part in path:
        h.update(b"\x1f")
        h.update(part.encode())
    return int.from_bytes(h.digest(), "little")


class Rng:
    """Named sub-stream factory rooted at a 64-bit seed."""

    def __init__(self, seed: int, path: tuple[str, ...] = ()):
        if not 0 <= int(seed) < 2**64:
            raise ValueError("seed must fit in 64 unsigned bits")
        self.seed = int(seed)
        self.path = tuple(path)

    def child(self, name: str) -> "Rng":
        return Rng(self.seed, self.path + (str(name),))

    def generator(self, name: str | None = None) -> np.random.Generator:
        path = self.path if name is None else self.path + (str(name),)
        return np.random.Generator(np.random.Philox(key=_key(self.seed, path)))

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, path={'/'.join(self.path) or '.'})"
