"""Seed derivation utilities.

All randomness in the package flows through counter-based Philox streams
keyed by a 64-bit mix of (root seed, purpose tags), so that independent
components (catalog, viewers, training shuffles, ...) draw from
independent streams and results are reproducible regardless of the order
or parallelism in which components run.
"""

import numpy as np

_MASK64 = (1 << 64) - 1


def mix64(*values: int) -> int:
    """Deterministically mix integers into a single 64-bit seed (splitmix64)."""
    h = 0x9E3779B97F4A7C15
    for v in values:
        h = (h ^ (int(v) & _MASK64)) & _MASK64
        h = (h ^ (h >> 30)) * 0xBF58476D1CE4E5B9 & _MASK64
        h = (h ^ (h >> 27)) * 0x94D049BB133111EB & _MASK64
        h = h ^ (h >> 31)
    return h & _MASK64


def stream(seed: int, *tags: int) -> np.random.Generator:
    """Independent RNG stream derived from a root seed and purpose tags."""
    return np.random.Generator(np.random.Philox(key=mix64(seed, *tags)))
