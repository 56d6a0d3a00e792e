"""Shared plumbing: contract errors, seeded RNG streams, array validation."""

from __future__ import annotations

import hashlib

import numpy as np


class ContractError(ValueError):
    """An operation was called with inputs that violate its contract."""


def require(condition: bool, message: str) -> None:
    if not condition:
        raise ContractError(message)


def _entropy_token(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFF
    digest = hashlib.sha256(str(part).encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


def spawn_rng(root_seed: int, *path) -> np.random.Generator:
    """Independent generator keyed on (root_seed, *path).

    Counter-based splitting: the stream depends only on the key, never on
    call order, so moving jobs between workers cannot reshuffle randomness.
    Path parts may be ints or strings.
    """
    key = [_entropy_token(root_seed)] + [_entropy_token(p) for p in path]
    return np.random.default_rng(np.random.SeedSequence(key))


def as_chw(array, name: str = "array") -> np.ndarray:
    """Validate a rank-3 [C, H, W] array and return it as an ndarray."""
    arr = np.asarray(array)
    require(arr.ndim == 3, f"{name} must have rank 3 [C,H,W], got rank {arr.ndim}")
    return arr
