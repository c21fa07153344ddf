import numpy as np


def derive_seed(*keys: int) -> int:
    """Stable 63-bit seed from a tuple of non-negative integers (e.g. master, round, slot)."""
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(2, np.uint64)[0] >> np.uint64(1))
