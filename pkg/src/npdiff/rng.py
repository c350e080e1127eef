"""Deterministic RNG streams.

Every source of randomness in the package draws from a Generator built by
`stream(root_seed, *tags)`. Tags name the consumer (stage, object id, step
index), so the stream for step k is identical whether a run reached k
directly or resumed from a checkpoint. String tags are folded to integers
with a fixed hash so streams are stable across processes and platforms.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _tag_to_int(tag) -> int:
    if isinstance(tag, (int, np.integer)):
        if tag < 0:
            raise ValueError(f"rng tags must be non-negative, got {tag}")
        return int(tag)
    if isinstance(tag, str):
        digest = hashlib.sha256(tag.encode("utf-8")).digest()
        return int.from_bytes(digest[:8], "little")
    raise TypeError(f"unsupported rng tag type: {type(tag).__name__}")


def stream(root_seed: int, *tags) -> np.random.Generator:
    """Generator for the substream identified by (root_seed, tags)."""
    entropy = [_tag_to_int(root_seed)] + [_tag_to_int(t) for t in tags]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
