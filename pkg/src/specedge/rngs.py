"""Named, independent random streams derived from one master seed."""

from __future__ import annotations

import hashlib

import numpy as np


def _name_key(name: str) -> int:
    return int.from_bytes(hashlib.blake2b(name.encode(), digest_size=8).digest(), "little")


def stream(master_seed: int, name: str, *extra: int) -> np.random.Generator:
    """Generator for ``name`` (optionally sub-keyed by integers such as a slot index).

    Streams with different names never share state, so perturbing one stream
    (e.g. the policy) leaves the others (channel, tasks, ...) untouched.
    """
    ss = np.random.SeedSequence(entropy=int(master_seed), spawn_key=(_name_key(name),) + tuple(int(e) for e in extra))
    return np.random.Generator(np.random.PCG64(ss))


class Streams:
    """Lazily created named streams for one run."""

    def __init__(self, master_seed: int):
        self.master_seed = int(master_seed)
        self._cache: dict[str, np.random.Generator] = {}

    def __getitem__(self, name: str) -> np.random.Generator:
        if name not in self._cache:
            self._cache[name] = stream(self.master_seed, name)
        return self._cache[name]

    def keyed(self, name: str, *extra: int) -> np.random.Generator:
        return stream(self.master_seed, name, *extra)
