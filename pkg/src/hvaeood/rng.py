"""Deterministic named RNG substreams derived from one root seed.

Every source of randomness in the package is a `Generator` obtained from
`substream(root_seed, name, *indices)`. Names are hashed with crc32, which is
stable across platforms and Python versions, so output files are reproducible
from the root seed alone.
"""

from __future__ import annotations

import zlib

import numpy as np

STREAM_INIT = "init"
STREAM_TRAIN = "train"
STREAM_BINARIZE_TRAIN = "binarize-train"
STREAM_BINARIZE_EVAL = "binarize-eval"
STREAM_SCORE = "score"
STREAM_ANALYZE = "analyze"


def substream(root_seed: int, name: str, *indices: int) -> np.random.Generator:
    """Generator for the (root_seed, name, indices...) substream."""
    entropy = [int(root_seed), zlib.crc32(name.encode("utf-8")), *[int(i) for i in indices]]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
