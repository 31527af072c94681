"""Deterministic derivation of named RNG streams from one master seed."""

from __future__ import annotations

import zlib

import numpy as np


def stream_key(*names) -> list:
    """Map stream names to stable integers (CRC32 of the utf-8 name)."""
    return [zlib.crc32(str(n).encode("utf-8")) for n in names]


def derive_rng(master_seed: int, *names) -> np.random.Generator:
    """Independent generator for (master_seed, names...); same inputs, same stream."""
    return np.random.default_rng([int(master_seed)] + stream_key(*names))


def derive_seed_list(master_seed: int, *names) -> list:
    """Entropy list for the stream, usable wherever a seed is accepted."""
    return [int(master_seed)] + stream_key(*names)
