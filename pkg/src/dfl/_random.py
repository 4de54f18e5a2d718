"""Named, seeded random streams.

Every consumer of randomness asks for a stream by purpose name, so adding a new
consumer never shifts the draws seen by an existing one.
"""

import zlib

import numpy as np

HYPOTHESIS = "hypothesis"
SOFT_FILTER = "soft-filter"
SPLIT = "split"
SYNTH = "synth"
SESSION = "session"
MONTE_CARLO = "monte-carlo"


def _purpose_key(purpose):
    return zlib.crc32(purpose.encode("utf-8"))


def stream(seed, purpose, *keys):
    """Return a Generator keyed by ``(seed, purpose, *keys)``."""
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    entropy = [int(seed), _purpose_key(purpose), *(int(k) for k in keys)]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def derive_seed(master_seed, *keys):
    """Deterministic 63-bit child seed, used for per-trial seeds."""
    ss = np.random.SeedSequence([int(master_seed), *(int(k) for k in keys)])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))
