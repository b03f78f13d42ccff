"""Named RNG streams derived from one global seed.

Every subsystem pulls its generator from `stream(seed, name)` so that adding
or reordering consumers never shifts another stream's draws.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _name_key(name: str) -> int:
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def stream(seed: int, name: str) -> np.random.Generator:
    """Deterministic generator for (seed, name), independent across names."""
    return np.random.default_rng(np.random.SeedSequence([seed, _name_key(name)]))


def stream_seed(seed: int, name: str) -> int:
    """A derived integer seed for consumers that take a plain seed."""
    return int(np.random.SeedSequence([seed, _name_key(name)]).generate_state(1)[0])
