"""Counter-based random substreams.

Every record that consumes randomness (a user's attribute vector, the edge
filter, a post's tokens, a training run) draws from its own Philox stream
keyed by ``(master_seed, tag, index)``. Results are therefore independent of
processing order.
"""

from __future__ import annotations

import zlib

import numpy as np

_TAGS: dict[str, int] = {}


def _tag_key(tag: str) -> int:
    key = _TAGS.get(tag)
    if key is None:
        key = zlib.crc32(tag.encode("utf-8"))
        _TAGS[tag] = key
    return key


def substream(seed: int, tag: str, *index: int) -> np.random.Generator:
    """Return an independent generator for ``(seed, tag, *index)``."""
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(_tag_key(tag), *map(int, index)))
    return np.random.Generator(np.random.Philox(ss))


def derive_seed(seed: int, tag: str, *index: int) -> int:
    """Integer seed for components that take one, drawn from ``substream``."""
    return int(substream(seed, tag, *index).integers(0, 2**31 - 1))
