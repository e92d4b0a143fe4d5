"""
Reproducible random number streams.

Every bootstrap replicate and Monte Carlo replication draws from its own
counter-based Philox generator keyed by ``(seed, index)``, so results do not
depend on execution order or on the number of threads.
"""
import numpy as np

__all__ = ['replicate_rng']


def replicate_rng(seed, index):
    """
    Generator for replicate ``index`` of a run seeded with ``seed``.

    Parameters
    ----------
    seed : int
        Master seed of the run.
    index : int
        Replicate index.

    Returns
    -------
    `numpy.random.Generator`
    """
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, index])))
