"""Deterministic seed derivation so one root seed drives every stage."""

from __future__ import annotations

import numpy as np


def derive_seed(base: int, *key: int) -> int:
    """Stable child seed for a (base, key...) path."""
    ss = np.random.SeedSequence([int(base) & 0xFFFFFFFF, *(int(k) & 0xFFFFFFFF for k in key)])
    return int(ss.generate_state(1, np.uint32)[0])
