"""Counter-based seed derivation.

Every randomized routine takes one base seed and derives an independent
64-bit seed per sample index, so results do not depend on how work is
batched or how many workers run. The derivation is the splitmix64
finalizer applied to ``base_seed XOR index * GOLDEN``.
"""

import numpy as np

_MASK = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15


def mix64(x: int) -> int:
    """splitmix64 finalizer: a bijective 64-bit avalanche mix."""
    z = x & _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return (z ^ (z >> 31)) & _MASK


def derive_seed(base_seed: int, index: int) -> int:
    """Per-sample seed i: mix64(base_seed XOR i*GOLDEN)."""
    return mix64((base_seed & _MASK) ^ ((index * GOLDEN) & _MASK))


def generator(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def derive_generator(base_seed: int, index: int) -> np.random.Generator:
    """Independent generator for sample ``index`` of a run seeded with
    ``base_seed``."""
    return generator(derive_seed(base_seed, index))
