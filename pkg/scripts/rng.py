"""
Keyed random streams.

Every random decision in a run is drawn from a generator derived from
(seed, *parts), never from shared generator state, so results do not depend
on call order or on which worker thread handles an instance.
"""

import hashlib

import numpy as np


def derive_seed(seed, *parts):
    """Mix a base seed with any number of key parts into SeedSequence entropy."""
    h = hashlib.sha256()
    h.update(str(int(seed)).encode("utf-8"))
    for part in parts:
        h.update(b"\x1f")
        h.update(str(part).encode("utf-8"))
    digest = h.digest()
    return [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 32, 4)]


def keyed_rng(seed, *parts):
    return np.random.default_rng(derive_seed(seed, *parts))


def keyed_uniform(seed, *parts):
    return float(keyed_rng(seed, *parts).random())


def keyed_index(seed, n, *parts):
    """Uniform integer in [0, n) for the stream (seed, *parts)."""
    return int(keyed_rng(seed, *parts).integers(n))


def text_digest(text):
    return hashlib.sha256(text.encode("utf-8")).hexdigest()
