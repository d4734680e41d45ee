"""Deterministic seed derivation for independent random streams."""

import zlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFF
    return zlib.crc32(str(part).encode())


def child_seed(root, *keys) -> np.random.SeedSequence:
    """Seed for the stream named by ``keys`` under ``root``.

    Stable across processes and Python versions (no use of ``hash``).
    """
    if isinstance(root, np.random.SeedSequence):
        entropy, base = root.entropy, tuple(root.spawn_key)
    else:
        entropy, base = int(root), ()
    return np.random.SeedSequence(entropy, spawn_key=base + tuple(_key(k) for k in keys))


def rng_for(root, *keys) -> np.random.Generator:
    return np.random.default_rng(child_seed(root, *keys))
