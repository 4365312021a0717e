"""Seedable random streams.

One root seed fans out into independent named streams (``"init"``,
``"dropout"``, ``"sampling"``, ...).  A stream is derived from the seed and
a stable hash of its name, so adding a new stream never perturbs the
others.
"""

import hashlib

import numpy as np


def _name_key(name):
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def derive_seed(seed, *names):
    """Return a 64-bit integer seed derived from ``seed`` and a name path."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(_name_key(n) for n in names))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def stream(seed, *names):
    """Fresh ``numpy.random.Generator`` for the named stream."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(_name_key(n) for n in names))
    return np.random.Generator(np.random.PCG64(ss))


class RngStreams:
    """Lazily created, cached named streams under one root seed."""

    def __init__(self, seed):
        self.seed = int(seed)
        self._streams = {}

    def __getitem__(self, name):
        if name not in self._streams:
            self._streams[name] = stream(self.seed, name)
        return self._streams[name]

    def child(self, name):
        """Independent ``RngStreams`` rooted at a derived seed."""
        return RngStreams(derive_seed(self.seed, name))
