"""Labelled seed substreams.

``derive_seed(root, label, *indices)`` feeds ``[root, crc32(label), *indices]``
to :class:`numpy.random.SeedSequence` and returns the first 63 bits of its
state. The result depends only on its arguments, so stages (training, each
IDE retrain, each example's Monte-Carlo draws) get disjoint, order-independent
streams.
"""

from __future__ import annotations

import zlib

import numpy as np


def derive_seed(root: int, label: str, *indices: int) -> int:
    entropy = [int(root) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(label.encode())] + [int(i) for i in indices]
    state = np.random.SeedSequence(entropy).generate_state(2, dtype=np.uint32)
    return int((int(state[0]) << 31) ^ int(state[1])) & 0x7FFFFFFFFFFFFFFF


def rng_for(root: int, label: str, *indices: int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(root, label, *indices))
