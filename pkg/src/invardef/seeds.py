"""Deterministic derivation of named random streams.

Every random choice in the package flows from one integer seed through
named substreams, so that independent components (splitting, parameter
init, attack sampling, domain bookkeeping) can be reseeded without
affecting each other and full runs replay exactly.
"""

from __future__ import annotations

import zlib

import numpy as np
import torch


def substream(seed: int, name: str) -> np.random.Generator:
    """Return a numpy generator for the (seed, name) stream.

    The stream is a pure function of its arguments: same seed and name
    always give the same draw sequence, distinct names give statistically
    independent sequences.
    """
    tag = zlib.crc32(name.encode("utf8"))
    return np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFF, tag]))


def stream_seed(seed: int, name: str) -> int:
    """A 63-bit integer drawn from the named stream (for seeding torch)."""
    return int(substream(seed, name).integers(0, 2**63 - 1))


def torch_generator(seed: int, name: str) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(stream_seed(seed, name))
    return gen
