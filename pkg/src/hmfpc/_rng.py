import numpy as np


def stream(*keys: int) -> np.random.Generator:
    """Counter-based generator keyed by a tuple of non-negative integers.

    Philox streams keyed through ``SeedSequence`` are reproducible across
    platforms, and distinct key tuples give independent streams, so work can
    be split (per subject, per draw, per replicate) without the results
    depending on scheduling.
    """
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(k) for k in keys])))


def float_key(x: float) -> int:
    """Stable integer key for a float (its IEEE-754 bit pattern)."""
    return int(np.float64(x).view(np.uint64))
