"""Counter-based random streams.

Every random draw in the library comes from a Philox counter-based generator
keyed by ``(seed, purpose, step)``.  Opening a stream is cheap and has no
global state, so a simulation step can be replayed in isolation and results do
not depend on the order in which steps or runs are executed.  Runs that share a
seed share noise (common random numbers), which is what the penalization sweeps
rely on.

Within a stream the draw for particle ``i`` sits at a fixed offset, so a fixed
``(seed, N, dt)`` reproduces bit-identical paths.
"""

from __future__ import annotations

import numpy as np

# Purpose tags partition the counter space so streams never overlap.
NOISE = 0
INIT = 1
CONTROL = 2
SUBSAMPLE = 3
PROBE = 4

_MAX_STEP = 1 << 64


def stream(seed: int, purpose: int, step: int = 0) -> np.random.Generator:
    """Generator for the given (seed, purpose, step) triple.

    The 256-bit Philox counter is laid out as ``purpose * 2^192 + step * 2^128``
    which leaves 2^128 draws per stream, far beyond any run here.
    """
    seed = int(seed)
    if not 0 <= seed < _MAX_STEP:
        raise ValueError(f"seed must be a uint64, got {seed}")
    if not 0 <= step < _MAX_STEP:
        raise ValueError(f"step out of range: {step}")
    counter = (int(purpose) << 192) + (int(step) << 128)
    return np.random.Generator(np.random.Philox(key=seed, counter=counter))


def step_normals(seed: int, step: int, n: int, m: int) -> np.ndarray:
    """The (n, m) standard-normal block driving simulation step ``step``."""
    return stream(seed, NOISE, step).standard_normal((n, m))
