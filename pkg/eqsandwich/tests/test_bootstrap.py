import json

import numpy as np
import pytest

from eqsandwich.bootstrap import parallel_map, percentile_ci, resample
from eqsandwich.datasets import Dataset
from eqsandwich.eecore import EstimatingFunctionSet, ParamVector
from eqsandwich.estimators import Estimator, FunctionSetEstimator, IPTWEstimator
from eqsandwich.exceptions import NoConvergence, TooManyFailures
from eqsandwich.nuisance_models import LogisticSpec
from eqsandwich.simlab import default_scenario, gen_longitudinal, gen_point_treatment


@pytest.fixture(scope='module')
def s1():
    return gen_point_treatment(default_scenario('S1', n=200), np.random.default_rng(31))


@pytest.fixture(scope='module')
def estimator():
    return IPTWEstimator(LogisticSpec(('l1', 'l2')))


class FailingEstimator(Estimator):
    name = 'failing'

    def estimate(self, data, init=None):
        raise NoConvergence('never converges')


def test_parallel_map_keeps_order():
    assert parallel_map(lambda x: x * x, range(10), threads=3) == [x * x for x in range(10)]
    assert parallel_map(lambda x: -x, [4], threads=4) == [-4]
    assert parallel_map(str, [], threads=1) == []


def test_resample_point(s1):
    sample = resample(s1, np.random.default_rng(0))
    assert len(sample) == len(s1)
    assert set(sample['l1']) <= set(s1['l1'])


def test_resample_longitudinal():
    data = gen_longitudinal(default_scenario('S2', n=100), np.random.default_rng(1))
    sample = resample(data, np.random.default_rng(0))
    assert len(sample) == len(data)
    assert sample.horizon == data.horizon
    assert set(sample.ids) <= set(data.ids)
    assert sample.oracle('y_never').shape == data.oracle('y_never').shape


def test_minimum_replicates(s1, estimator):
    with pytest.raises(ValueError, match='at least 200'):
        percentile_ci(estimator, s1, B=100)
    with pytest.raises(ValueError):
        percentile_ci(estimator, s1, B=200, level=0)


def test_percentile_ci(s1, estimator):
    result = percentile_ci(estimator, s1, B=200, seed=4)
    assert result.replicate_estimates.shape == (200, 2)
    assert result.failed_replicates == 0
    assert np.all(result.ci_lower < result.estimate)
    assert np.all(result.estimate < result.ci_upper)
    assert np.allclose(result.ci_lower, np.quantile(result.replicate_estimates, 0.025, axis=0))
    assert np.allclose(result.ci_upper, np.quantile(result.replicate_estimates, 0.975, axis=0))

    # the bootstrap variance tracks the corrected sandwich
    corrected = np.diag(estimator.fit(s1).report.corrected_score)
    ratio = np.diag(result.variance) / corrected
    assert np.all((ratio > 0.5) & (ratio < 2))
    json.dumps(result.to_dict())


def test_bootstrap_does_not_depend_on_threads(s1, estimator):
    serial = percentile_ci(estimator, s1, B=200, seed=7, threads=1)
    threaded = percentile_ci(estimator, s1, B=200, seed=7, threads=2)
    assert np.array_equal(serial.replicate_estimates, threaded.replicate_estimates)
    assert np.array_equal(serial.ci_lower, threaded.ci_lower)
    other = percentile_ci(estimator, s1, B=200, seed=8, threads=1)
    assert not np.array_equal(serial.replicate_estimates, other.replicate_estimates)


def test_too_many_failures(s1):
    with pytest.raises(TooManyFailures):
        percentile_ci(FailingEstimator(), s1, B=200,
                      full_fit=ParamVector(np.zeros(2), np.zeros(3)))


def test_identical_rows_give_zero_width_interval():
    data = Dataset({'y': np.full(50, 2.0)})
    mean = FunctionSetEstimator(EstimatingFunctionSet(
        dim_psi=1, dim_theta=0, u1=lambda d, psi, theta: d['y'] - psi[0], name='mean'))
    result = percentile_ci(mean, data, B=200, seed=1)
    assert result.failed_replicates == 0
    assert np.allclose(result.ci_lower, [2.0]) and np.allclose(result.ci_upper, [2.0])
    assert np.allclose(result.variance, 0.0)
