"""Seed derivation for reproducible, order-independent random streams."""

from __future__ import annotations

from contextlib import contextmanager
from typing import Iterator

import numpy as np
import torch

__all__ = ["derive_seed", "make_rng", "seeded_init"]


def derive_seed(seed: int, *keys: int) -> int:
    """Return a 63-bit seed derived from ``seed`` and integer ``keys``.

    Streams derived with different keys are statistically independent, so
    per-image work can run in any order (or in parallel) with the same result.
    """
    state = np.random.SeedSequence([int(seed), *map(int, keys)]).generate_state(2)
    return int((int(state[0]) << 31) ^ int(state[1])) & 0x7FFF_FFFF_FFFF_FFFF


def make_rng(seed: int, *keys: int) -> torch.Generator:
    """A CPU ``torch.Generator`` seeded from ``derive_seed(seed, *keys)``."""
    rng = torch.Generator()
    rng.manual_seed(derive_seed(seed, *keys) if keys else int(seed))
    return rng


@contextmanager
def seeded_init(seed: int) -> Iterator[None]:
    """Construct modules under a global torch RNG seeded with ``seed``.

    The caller's global RNG state is restored on exit.
    """
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        yield
