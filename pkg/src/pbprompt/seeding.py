"""Deterministic random-stream derivation.

Every random draw in the package comes from a generator derived as
``child_rng(master_seed, purpose_tag, *indices)``.  The purpose tag is a short
string hashed with blake2 (stable across processes, unlike ``hash()``), and
the indices are plain integers such as step, class or image counters.  Equal
paths always yield bit-identical streams.
"""

import hashlib

import numpy as np


def _tag_to_int(tag: str) -> int:
    digest = hashlib.blake2s(tag.encode("utf-8"), digest_size=4).digest()
    return int.from_bytes(digest, "little")


def seed_sequence(master: int, tag: str, *indices: int) -> np.random.SeedSequence:
    entropy = [int(master) & 0xFFFFFFFF, _tag_to_int(tag)]
    entropy.extend(int(i) & 0xFFFFFFFF for i in indices)
    return np.random.SeedSequence(entropy)


def child_rng(master: int, tag: str, *indices: int) -> np.random.Generator:
    """A PCG64 generator at the stream (master, tag, *indices)."""
    return np.random.default_rng(seed_sequence(master, tag, *indices))
