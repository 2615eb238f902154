"""Named random sub-streams derived from one root seed.

Every consumer of randomness asks for a generator keyed by a root seed plus
a path of names/indices, e.g. ``stream(seed, "lhs")`` or
``stream(seed, "episode-noise", record, evaluation)``.  Streams with
different keys are statistically independent, and a given key always yields
the same sequence, so changing how one part of the pipeline consumes random
numbers never perturbs another part.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key_part(part: int | str) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    if part < 0:
        raise ValueError(f"stream key indices must be non-negative, got {part}")
    return int(part)


def seed_sequence(seed: int, *key: int | str) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_key_part(k) for k in key))


def stream(seed: int, *key: int | str) -> np.random.Generator:
    """Return a fresh generator for the sub-stream ``key`` of ``seed``."""
    return np.random.default_rng(seed_sequence(seed, *key))


def derive_seed(seed: int, *key: int | str) -> int:
    """Collapse a sub-stream into a plain 63-bit integer seed."""
    return int(seed_sequence(seed, *key).generate_state(2, dtype=np.uint32).view(np.uint64)[0] >> 1)


def as_generator(rng: int | np.random.Generator | None) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)
