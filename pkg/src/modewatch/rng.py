"""Seeded random streams.

All randomness goes through numpy's Philox4x32-10 counter-based bit
generator. Seeds are plain non-negative integers; sub-seeds are derived by
hashing ``(seed, *keys)`` through :class:`numpy.random.SeedSequence`, which is
stable across platforms and numpy versions, so trial ``i`` of a run with master
seed ``s`` always sees the same stream no matter which worker executes it.
"""

from __future__ import annotations

import os

import numpy as np

from .errors import ConfigError

SEED_ENV_VAR = "MODEWATCH_SEED"
DEFAULT_SEED = 0


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed))))


def derive_seed(seed: int, *keys: int) -> int:
    """Hash a parent seed and integer keys into a 64-bit child seed."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys))
    lo, hi = ss.generate_state(2, dtype=np.uint32)
    return int(lo) | (int(hi) << 32)


def default_seed() -> int:
    raw = os.environ.get(SEED_ENV_VAR)
    if raw is None or raw.strip() == "":
        return DEFAULT_SEED
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(SEED_ENV_VAR, f"must be an integer, got {raw!r}") from None
