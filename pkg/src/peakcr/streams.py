"""Counter-based random streams.

Every random draw in peakcr comes from a Philox generator keyed by a master
seed and a tuple of integer keys (replicate, subject, purpose ...). A stream
depends only on its key, never on which thread asks for it or in what order,
so parallel runs reproduce serial ones bit for bit.
"""

import numpy as np

# Stream purposes, used as the last key component.
NOISE = 0
SIGNAL_DRAWS = 1
MONTE_CARLO = 2
SERIES = 3


def generator(seed: int, *keys: int) -> np.random.Generator:
    """Generator for the substream (seed, *keys).

    Args:
        seed: Master seed (non-negative, up to 128 bits).
        *keys: Non-negative integers naming the substream.

    Returns:
        A numpy Generator backed by Philox.
    """
    sequence = np.random.SeedSequence(seed, spawn_key=tuple(int(key) for key in keys))
    return np.random.Generator(np.random.Philox(sequence))


def fresh_seed() -> int:
    """Draw a seed from OS entropy (printed by the CLI so runs can be repeated)."""
    return int(np.random.SeedSequence().entropy)
