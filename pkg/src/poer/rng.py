"""Seeded random streams.

Every random draw in the package goes through :func:`stream`, which builds a
``numpy.random.Generator`` on top of the Philox4x64 counter-based bit
generator. The Philox key is derived from ``SeedSequence(seed, spawn_key)``
where the spawn key is the tuple of stream labels, each label hashed with
CRC-32 when it is a string. Two calls with the same ``(seed, *labels)`` yield
the same stream on every platform; different labels give independent streams.
"""

from __future__ import annotations

import zlib

import numpy as np


def _label_key(label: int | str) -> int:
    if isinstance(label, str):
        return zlib.crc32(label.encode("utf-8"))
    label = int(label)
    if label < 0:
        raise ValueError(f"stream labels must be non-negative, got {label}")
    return label


def stream(seed: int, *labels: int | str) -> np.random.Generator:
    """Return an independent Philox generator for ``(seed, *labels)``."""
    seq = np.random.SeedSequence(int(seed), spawn_key=tuple(_label_key(lb) for lb in labels))
    return np.random.Generator(np.random.Philox(seq))
