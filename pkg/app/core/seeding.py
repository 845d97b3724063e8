"""Reproducible random streams derived from a master seed and namespaced role tags.

Every stream is a Philox (counter-based) generator keyed by a SeedSequence whose
entropy is the master seed followed by a digest of the role and its tags, so the
stream of a job never depends on how many other jobs ran before it.
"""

import hashlib
from enum import Enum
from typing import Iterable, Tuple, Union

import numpy as np

from app.core.errors import InvalidArgumentError

Tag = Union[int, float, str]


class StreamRole(str, Enum):
    TRAINING = "training"
    VALIDATION = "validation"
    POOL = "pool"
    CERTIFIED = "certified"
    LEMMA = "lemma"


def _canonical(tag: Tag) -> str:
    if isinstance(tag, bool):
        return str(tag)
    if isinstance(tag, (int, np.integer)):
        return str(int(tag))
    if isinstance(tag, (float, np.floating)):
        return repr(float(tag))
    return str(tag)


def stream_key(role: StreamRole, *tags: Tag) -> str:
    """Namespaced textual key, e.g. ``training|1.5|3``."""
    return "|".join([StreamRole(role).value] + [_canonical(t) for t in tags])


def _digest_words(key: str) -> list:
    digest = hashlib.blake2b(key.encode("utf-8"), digest_size=16).digest()
    return [int.from_bytes(digest[i:i + 4], "little") for i in range(0, 16, 4)]


def seed_sequence(master_seed: int, role: StreamRole, *tags: Tag) -> np.random.SeedSequence:
    if master_seed < 0:
        raise InvalidArgumentError(f"master seed must be non-negative, got {master_seed}")
    return np.random.SeedSequence([int(master_seed)] + _digest_words(stream_key(role, *tags)))


def make_rng(master_seed: int, role: StreamRole, *tags: Tag) -> np.random.Generator:
    """Generator for one job; a pure function of (master_seed, role, tags)."""
    return np.random.Generator(np.random.Philox(seed_sequence(master_seed, role, *tags)))


def assert_disjoint_streams(keys: Iterable[Tuple[StreamRole, Tuple[Tag, ...]]]) -> None:
    """Fail fast when two jobs of a run would share a stream, e.g. validation and training."""
    seen = {}
    for role, tags in keys:
        key = stream_key(role, *tags)
        words = tuple(_digest_words(key))
        if words in seen and seen[words] != key:
            raise InvalidArgumentError(f"stream tags collide: {seen[words]!r} and {key!r}")
        if words in seen:
            raise InvalidArgumentError(f"stream tag {key!r} is used twice")
        seen[words] = key
