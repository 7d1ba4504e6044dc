"""Seeded PRNG construction shared by every module.

All randomness flows through numpy's Philox bit generator, a 64-bit
counter-based PRNG with a published algorithm, so any stream here can be
reproduced from (seed, stream tags) alone. Gaussian draws use
``Generator.standard_normal``, numpy's ziggurat implementation. Streams are
derived per call site, never shared, which keeps parallel evaluation
order-independent.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1

# Stream tags, one per independent consumer of randomness.
STREAM_SPLIT = 1
STREAM_SYNTH = 2
STREAM_NOISE = 3
STREAM_MC = 4
STREAM_INIT = 5
STREAM_SHUFFLE = 6
STREAM_GRADCHECK = 7


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Philox generator for `seed` on the sub-stream named by `stream` tags."""
    ss = np.random.SeedSequence(
        entropy=int(seed) & _MASK64,
        spawn_key=tuple(int(s) & _MASK64 for s in stream),
    )
    return np.random.Generator(np.random.Philox(ss))
