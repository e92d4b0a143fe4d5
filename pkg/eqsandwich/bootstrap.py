"""
Nonparametric bootstrap with percentile confidence intervals.

Each replicate resamples the independent units with replacement and reruns the
whole pipeline, nuisance fit included, so the spread of the replicates picks up
the estimation of theta.
"""
import os
from dataclasses import dataclass

import numpy as np
from pathos.pools import ThreadPool

from eqsandwich import log
from eqsandwich.constants import Thresholds
from eqsandwich.exceptions import EstimationError, TooManyFailures
from eqsandwich.streams import replicate_rng

__all__ = ['BootstrapResult', 'percentile_ci', 'resample', 'parallel_map']


def parallel_map(func, items, threads=1):
    """
    Ordered map over ``items``, on a thread pool when ``threads > 1``.

    ``threads=-1`` uses every available core.
    """
    items = list(items)
    if threads == -1:
        threads = os.cpu_count() or 1
    if threads <= 1 or len(items) <= 1:
        return [func(item) for item in items]

    pool = ThreadPool(nodes=threads)
    try:
        pool.restart()
    except (AssertionError, ValueError):
        pass
    try:
        return pool.map(func, items)
    finally:
        pool.close()
        pool.join()
        pool.clear()


def resample(data, rng):
    """
    Draw ``len(data)`` units with replacement.
    """
    return data.take(rng.integers(0, len(data), size=len(data)))


@dataclass(frozen=True, eq=False)
class BootstrapResult:
    """
    Bootstrap replicates of psi hat with percentile intervals.

    Attributes
    ----------
    replicate_estimates : `numpy.ndarray`
        ``(B_ok, p)`` estimates from the replicates that succeeded, in replicate order.
    ci_lower, ci_upper : `numpy.ndarray`
    level : float
        Nominal coverage of the intervals.
    failed_replicates : int
    estimate : `numpy.ndarray`
        Full-data psi hat.
    """
    replicate_estimates: np.ndarray
    ci_lower: np.ndarray
    ci_upper: np.ndarray
    level: float
    failed_replicates: int
    estimate: np.ndarray

    @property
    def variance(self):
        """
        Sample covariance of the replicates.
        """
        return np.atleast_2d(np.cov(self.replicate_estimates, rowvar=False, ddof=1))

    def to_dict(self):
        return {'estimate': self.estimate.tolist(), 'ci_lower': self.ci_lower.tolist(),
                'ci_upper': self.ci_upper.tolist(), 'level': self.level,
                'replicates': int(self.replicate_estimates.shape[0]),
                'failed_replicates': int(self.failed_replicates),
                'variance': self.variance.tolist()}


def percentile_ci(pipeline, data, B=500, level=0.95, seed=0, threads=1, full_fit=None):
    """
    Percentile bootstrap interval for psi.

    Parameters
    ----------
    pipeline : `~eqsandwich.estimators.Estimator`
        Refitted from scratch (nuisance and psi) on every replicate.
    data : `~eqsandwich.datasets.Dataset` or `~eqsandwich.datasets.LongitudinalDataset`
        Resampled by subject or person.
    B : int
        Number of replicates, at least 200.
    level : float
        Nominal coverage; the interval is the ``(1-level)/2`` and
        ``(1+level)/2`` quantiles with linear interpolation.
    seed : int
        Replicate ``b`` draws from a stream keyed by ``(seed, b)``, so the
        result does not depend on ``threads``.
    threads : int
    full_fit : `~eqsandwich.eecore.ParamVector`, optional
        Full-data estimate used as warm start; computed when not given.

    Returns
    -------
    `BootstrapResult`

    Raises
    ------
    TooManyFailures
        If more than 2% of the replicates fail.
    """
    if B < Thresholds().get('bootstrap_min_b'):
        raise ValueError(f'B must be at least {Thresholds().get("bootstrap_min_b")}, got {B}.')
    if not 0 < level < 1:
        raise ValueError(f'level must be in (0, 1), got {level}.')
    if full_fit is None:
        full_fit = pipeline.estimate(data)

    def replicate(b):
        sample = resample(data, replicate_rng(seed, b))
        try:
            return pipeline.estimate(sample, init=full_fit).psi
        except EstimationError as err:
            log.warning(f'Bootstrap replicate {b} failed: {type(err).__name__}: {err}')
            return None

    log.info(f'Running {B} bootstrap replicates of {pipeline.name} on {len(data)} units')
    results = parallel_map(replicate, range(B), threads)
    estimates = [psi for psi in results if psi is not None]
    failed = B - len(estimates)
    if failed > Thresholds().get('failure_cap') * B:
        raise TooManyFailures(f'{failed} of {B} bootstrap replicates failed.')

    estimates = np.array(estimates)
    alpha = 1 - level
    lower, upper = np.quantile(estimates, [alpha / 2, 1 - alpha / 2], axis=0)
    return BootstrapResult(estimates, lower, upper, level, failed, full_fit.psi)
