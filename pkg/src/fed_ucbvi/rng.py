"""Seeded, splittable random streams.

Every stream is a Philox (counter-based) generator keyed by the run seed and
a spawn key, so streams are independent of creation order and of how many
agents exist.
"""

from __future__ import annotations

import numpy as np

# spawn-key namespaces
_EPISODES = 0
_COMMON_ENV = 1
_AGENT_ENV = 2


def _check_seed(seed: int) -> int:
    seed = int(seed)
    if seed < 0 or seed >= 2**64:
        raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
    return seed


def make_generator(seq: np.random.SeedSequence) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seq))


def split(seed: int, *key: int) -> np.random.Generator:
    """Generator for the child stream ``key`` of ``seed``."""
    return make_generator(np.random.SeedSequence(_check_seed(seed), spawn_key=tuple(key)))


def agent_stream(seed: int, i: int) -> np.random.Generator:
    """Episode stream of agent ``i``."""
    return split(seed, _EPISODES, i)


def common_env_stream(seed: int) -> np.random.Generator:
    """Stream used to draw the shared part of an environment."""
    return split(seed, _COMMON_ENV)


def agent_env_stream(seed: int, i: int) -> np.random.Generator:
    """Stream used to draw agent ``i``'s individual kernel and reward offsets."""
    return split(seed, _AGENT_ENV, i)
