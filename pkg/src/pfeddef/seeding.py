"""Deterministic derivation of independent random streams.

Every source of randomness in a run is a numpy Generator seeded through
``derive_seed(master, *tokens)``, where the token path names the purpose
(e.g. ``("shuffle", round, client)``). Identical paths always yield the
same stream, distinct paths yield statistically independent ones, and no
stream identity depends on scheduling or worker count.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def _splitmix64(state: int) -> int:
    state = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


def _token_value(token) -> int:
    if isinstance(token, str):
        digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
        return int.from_bytes(digest, "little")
    if isinstance(token, (int, np.integer)):
        return int(token) & _MASK64
    raise TypeError(f"seed tokens must be str or int, got {type(token).__name__}")


def derive_seed(master: int, *tokens) -> int:
    """Map a master seed plus a token path to a 64-bit child seed."""
    state = _splitmix64(int(master) & _MASK64)
    for token in tokens:
        state = _splitmix64(state ^ _token_value(token))
    return state


def derive_rng(master: int, *tokens) -> np.random.Generator:
    """Generator seeded by :func:`derive_seed` for the same arguments."""
    return np.random.default_rng(derive_seed(master, *tokens))
