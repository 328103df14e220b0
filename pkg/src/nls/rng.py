"""Deterministic random streams derived from a root seed plus string tags.

Every stochastic component (weight init, shuffling, augmentation draws) pulls
its own generator via `child_rng`, so adding or removing one consumer never
shifts the draws seen by another. Tags are hashed with blake2s, which is
stable across platforms and Python versions (unlike `hash`).
"""

import hashlib

import numpy as np


def child_rng(seed: int, *tags) -> np.random.Generator:
    """Return a Generator unique to (seed, tags), independent of call order."""
    if seed < 0:
        raise ValueError(f"seed must be nonnegative, got {seed}")
    words = [int(seed)]
    for tag in tags:
        if isinstance(tag, (int, np.integer)):
            if tag < 0:
                raise ValueError(f"integer tags must be nonnegative, got {tag}")
            words.append(int(tag))
        else:
            digest = hashlib.blake2s(str(tag).encode("utf-8")).digest()
            words.append(int.from_bytes(digest[:8], "little"))
    return np.random.default_rng(words)
