"""Deterministic seed derivation for independent sub-streams."""

import numpy as np


def derive_seed(*parts: int) -> int:
    """Hash a tuple of integers into a fresh 32-bit seed.

    Used wherever one configured seed has to fan out into independent
    per-student / per-sample / per-stage streams without correlation.
    """
    seq = np.random.SeedSequence([int(p) & 0xFFFFFFFF for p in parts])
    return int(seq.generate_state(1)[0])
