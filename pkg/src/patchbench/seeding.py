"""Derived random streams keyed by (master seed, stable ids, tags).

Keying streams by content-derived image ids (rather than batch position) makes
batched runs order-independent: permuting a batch permutes the verdicts but
never changes any of them.
"""
from __future__ import annotations

import numpy as np

# substream tags
TAG_DETECT = 1
TAG_MASK = 2
TAG_HOLDOUT_ENTRY = 3


def derive_seed(*parts: int) -> int:
    """Collapse integer key parts into a single 32-bit seed."""
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def derive_rng(*parts: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(p) for p in parts]))
