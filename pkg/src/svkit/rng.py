"""Named deterministic random streams derived from one master seed.

Every stage (init, shuffling, augmentation, cropping, synthesis) pulls its
own generator so stages stay reproducible in isolation.
"""
from __future__ import annotations

import zlib

import numpy as np


def stream(seed: int, name: str) -> np.random.Generator:
    """Generator for the (seed, name) pair; stable across runs and platforms."""
    tag = zlib.crc32(name.encode("utf-8"))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, tag])))
