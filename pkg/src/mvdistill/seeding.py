"""Deterministic seed derivation.

Every random draw in the project flows from one 64-bit seed through
`mix64`, a splitmix64-style finalizer.  Derived seeds depend only on their
inputs, never on call order or worker count.
"""

import numpy as np

_MASK = (1 << 64) - 1

# Fixed stream tags so independent consumers of the same (seed, step)
# never collide.
TAG_BATCH = 0xB47C5E1EC7ED
TAG_CROPS = 0xC209F5A3
TAG_DROPPATH = 0xD209A7B1
TAG_INIT = 0x1A17
TAG_SPLIT = 0x5917
TAG_FINETUNE = 0xF17E


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def mix64(*parts: int) -> int:
    """Fold any number of integers into one well-mixed 64-bit seed."""
    acc = 0x243F6A8885A308D3
    for p in parts:
        acc = _splitmix64((acc ^ (int(p) & _MASK)) & _MASK)
    return acc


def rng_from(*parts: int) -> np.random.Generator:
    """PCG64 generator seeded from mixed parts; stateless given inputs."""
    return np.random.Generator(np.random.PCG64(mix64(*parts)))
