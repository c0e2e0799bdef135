"""Named random substreams derived from one run seed."""

from __future__ import annotations

import zlib

import numpy as np

STREAMS = ("corpus", "masking", "negatives", "init", "batching", "dropout", "eval")


def substream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Generator for stream ``name``; ``extra`` (e.g. a step index) further splits it.

    Streams are keyed by a stable hash of the name so adding a stream never
    shifts the others.
    """
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence([int(seed), key, *map(int, extra)]))
