"""Seed derivation shared by the library and the experiment runner.

Seeds are derived by hashing a master seed together with tags (strings or
integers) through a splitmix64 chain, so a child seed depends only on what
it is for, never on execution order.
"""

import hashlib

MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return x ^ (x >> 31)


def _tag_int(tag) -> int:
    if isinstance(tag, bool):
        tag = int(tag)
    if isinstance(tag, int):
        return tag & MASK64
    if isinstance(tag, float):
        tag = repr(tag)
    data = str(tag).encode("utf-8")
    return int.from_bytes(hashlib.blake2b(data, digest_size=8).digest(), "little")


def derive_seed(master: int, *tags) -> int:
    """Child seed of ``master`` for the given tags (order matters)."""
    x = splitmix64(int(master) & MASK64)
    for t in tags:
        x = splitmix64(x ^ _tag_int(t))
    return x
