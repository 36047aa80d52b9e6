"""Seed derivation: every stage draws from a named child of the master seed.

Children are derived via SeedSequence keyed on a CRC of the stage name (plus
an optional index, e.g. a per-image stream), so adding a stage never perturbs
another stage's random stream.
"""

import zlib

import numpy as np


def child_seed(master, name, index=0):
    """Stable 64-bit child seed for (master, stage-name, index)."""
    key = zlib.crc32(name.encode("utf-8"))
    ss = np.random.SeedSequence([int(master) & 0xFFFFFFFFFFFFFFFF, key, int(index)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def child_rng(master, name, index=0):
    return np.random.default_rng(child_seed(master, name, index))
