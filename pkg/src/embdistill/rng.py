"""Deterministic random streams.

All stochastic components (corpus generation, teacher weights, model
initialization, epoch shuffling) draw from named Philox streams so that
every artifact is a pure function of the configured seeds.  Philox is a
64-bit counter-based generator with a stable, documented implementation
in numpy; the generator name is recorded in data manifests.
"""

import hashlib

import numpy as np

PRNG_NAME = "numpy-philox4x64"


def _tag_to_int(tag) -> int:
    if isinstance(tag, (int, np.integer)):
        return int(tag) & 0xFFFFFFFFFFFFFFFF
    digest = hashlib.sha256(str(tag).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def stream(seed: int, *tags) -> np.random.Generator:
    """Return an independent generator for (seed, *tags).

    Tags may be ints or strings; strings are hashed to 64-bit ints so the
    stream identity does not depend on Python's per-process hash seed.
    """
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [_tag_to_int(t) for t in tags]
    return np.random.Generator(np.random.Philox(seed=entropy))
