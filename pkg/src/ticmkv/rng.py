"""Deterministic counter-based noise streams.

Every Monte-Carlo draw in the package is produced by a Philox generator keyed
on ``(seed, stream tag, index...)`` through a :class:`numpy.random.SeedSequence`
spawn key.  Any block of noise can therefore be regenerated on demand, results
never depend on scheduling or worker count, and two simulations that share a
seed see literally the same increments (common random numbers).
"""
from __future__ import annotations

import numpy as np

# Stream tags.  INIT and DRIVE are shared by the interacting-particle and
# n-player simulators on purpose: with measure-independent coefficients the
# two must produce bit-identical paths for equal seeds.
INIT = 0
DRIVE = 1
PROBE = 2
PROJECTIONS = 3
SAMPLING = 4

_MAX_SEED = 2**63 - 1


def check_seed(seed: int) -> int:
    """Validate and normalize a user-supplied master seed."""
    if isinstance(seed, bool) or not isinstance(seed, (int, np.integer)):
        raise TypeError(f"seed must be an integer, got {type(seed).__name__}")
    seed = int(seed)
    if not 0 <= seed <= _MAX_SEED:
        raise ValueError(f"seed must lie in [0, 2**63), got {seed}")
    return seed


def generator(seed: int, tag: int, *index: int) -> np.random.Generator:
    """Generator for the substream keyed by ``(seed, tag, *index)``."""
    ss = np.random.SeedSequence(entropy=check_seed(seed), spawn_key=(tag, *index))
    return np.random.Generator(np.random.Philox(ss))


def normal_block(seed: int, tag: int, step: int, shape) -> np.ndarray:
    """Standard-normal block for one time step of one stream.

    Keyed by the absolute step index, not by iteration count, so repeated
    fixed-point iterations and composite controls reuse identical increments.
    """
    return generator(seed, tag, step).standard_normal(shape)


def derive_seed(seed: int, tag: int, index: int) -> int:
    """A fresh 63-bit seed for an independent child stream (e.g. one probe)."""
    state = np.random.SeedSequence(
        entropy=check_seed(seed), spawn_key=(tag, index)
    ).generate_state(1, dtype=np.uint64)[0]
    return int(state) & _MAX_SEED
