"""Labelled splits of one master seed."""

import zlib

import numpy as np


def derive_rng(seed: int, label: str) -> np.random.Generator:
    """Independent generator for ``label``; same (seed, label) gives the same stream."""
    tag = zlib.crc32(label.encode("utf-8")) & 0xFFFFFFFF
    return np.random.default_rng(np.random.SeedSequence([int(seed) & (2**64 - 1), tag]))
