import json

import numpy as np
import pytest

from eqsandwich.estimators import AIPWEstimator, IPTWEstimator, SNMMEstimator, SnmmSpec
from eqsandwich.exceptions import TooManyFailures
from eqsandwich.nuisance_models import (LinearOutcomeSpec, LogisticSpec, PooledLogisticSpec,
                                        fit_moment_scale)
from eqsandwich.simlab import (SCENARIOS, MonteCarloResult, ScenarioConfig, coverage,
                               default_scenario, gen_longitudinal, gen_mom_nuisance,
                               gen_point_treatment, generate, run_replications,
                               scenario_scale_model, true_outcome_coefficients, true_theta,
                               truth)
from eqsandwich.streams import replicate_rng
from eqsandwich.variance import ESTIMATORS

COVARIATES = ('l1', 'l2')


def test_builtin_scenarios():
    assert set(SCENARIOS) == {'S1', 'S2', 'S3'}
    assert np.array_equal(truth(SCENARIOS['S1']), [1.0, 0.0])
    assert np.array_equal(truth(SCENARIOS['S2']), [1.0, -0.2, 0.0])
    assert np.array_equal(true_theta(SCENARIOS['S3']), [2.0])
    cfg = default_scenario('S1', n=100, confounding=2.0)
    assert (cfg.n, cfg.confounding) == (100, 2.0)
    assert np.allclose(true_theta(cfg), [0.0, 0.8, -0.8])
    json.dumps(cfg.to_dict())


@pytest.mark.parametrize('overrides', [
    {'n': 10},
    {'generator': 'markov'},
    {'theta': (0.0, 1.0)},
    {'psi': (1.0, 2.0)},
    {'confounding': 10.0},
    {'scale': 0.0},
    {'noise_sd': -1.0},
])
def test_scenario_validation(overrides):
    with pytest.raises(ValueError):
        default_scenario('S1', **overrides)


def test_longitudinal_validation():
    with pytest.raises(ValueError):
        default_scenario('S2', horizon=11)
    with pytest.raises(ValueError):
        default_scenario('S2', psi=(1.0, 0.0, 0.0, 0.0))
    with pytest.raises(ValueError):
        default_scenario('S7')
    with pytest.raises(TypeError):
        default_scenario('S1', sample_size=10)


def test_point_treatment_oracles():
    cfg = default_scenario('S1', n=4000)
    data = gen_point_treatment(cfg, np.random.default_rng(41))
    assert data.columns == ('y', 'a', 'l1', 'l2')
    y1, y0 = data.oracle('y1'), data.oracle('y0')
    a = data['a']
    assert np.array_equal(data['y'], np.where(a == 1, y1, y0))
    assert np.allclose(y1 - y0, cfg.psi[0])
    assert np.max(np.abs(data['l1'])) <= cfg.truncation
    assert abs(np.mean(a) - np.mean(data.oracle('propensity'))) < 0.05
    # least squares on the oracle outcomes recovers the outcome coefficients
    x = np.column_stack([np.ones(cfg.n), data['l1'], data['l2']])
    xi1, *_ = np.linalg.lstsq(x, y1, rcond=None)
    assert np.allclose(xi1, true_outcome_coefficients(cfg)[:3], atol=0.1)


def test_treated_share_with_null_propensity():
    cfg = default_scenario('S1', n=4000, theta=(0.0, 0.0, 0.0))
    data = gen_point_treatment(cfg, np.random.default_rng(44))
    assert np.allclose(data.oracle('propensity'), 0.5)
    # four standard errors of a Bernoulli(1/2) share
    assert abs(np.mean(data['a']) - 0.5) < 4 * np.sqrt(0.25 / cfg.n)


def test_generation_is_seeded():
    cfg = default_scenario('S1', n=100)
    assert np.array_equal(generate(cfg)['y'], generate(cfg)['y'])
    first = generate(cfg, np.random.default_rng(1))['y']
    second = generate(cfg, np.random.default_rng(2))['y']
    assert not np.array_equal(first, second)


def test_mom_nuisance_scale():
    cfg = default_scenario('S3', n=5000)
    data = gen_mom_nuisance(cfg, np.random.default_rng(42))
    assert np.max(np.abs(data['l1'])) <= cfg.scale * cfg.truncation
    scale = fit_moment_scale(scenario_scale_model(cfg), data)
    assert scale[0] == pytest.approx(cfg.scale, rel=0.05)


def test_longitudinal_consistency():
    cfg = default_scenario('S2', n=500)
    data = gen_longitudinal(cfg, np.random.default_rng(43))
    K = cfg.horizon
    assert data.y.shape == (500, K + 2)
    assert data.a.shape == (500, K + 1)
    assert data.is_absorbing
    assert np.max(np.abs(data.l)) <= cfg.truncation

    y_start = data.oracle('y_start')
    y_never = data.oracle('y_never')
    assert y_start.shape == (500, K + 1, K + 2)
    first = data.first_treatment
    for i in range(len(data)):
        expected = y_never[i] if first[i] > K else y_start[i, first[i]]
        assert np.allclose(data.y[i], expected)
    # outcomes before the start are untouched
    for m in range(K + 1):
        assert np.allclose(y_start[:, m, :m + 1], y_never[:, :m + 1])
    # effect of starting at 0, measured at K+1
    m = 0
    gamma = (K + 1 - m) * (cfg.psi[0] + cfg.psi[1] * m + cfg.psi[2] * m ** 2)
    assert np.allclose(y_start[:, 0, K + 1] - y_never[:, K + 1], gamma)


def _result(estimates, variance, truth_value=(0.0,)):
    estimates = np.asarray(estimates, dtype=float)[:, np.newaxis]
    covariances = np.full((len(estimates), len(ESTIMATORS), 1, 1), variance)
    return MonteCarloResult.from_arrays(truth_value, estimates, covariances)


def test_coverage_extremes():
    estimates = np.linspace(-1, 1, 20) + 0.01
    assert np.all(coverage(_result(estimates, 1e6))['coverage'].values == 1)
    assert np.all(coverage(_result(estimates, 0.0))['coverage'].values == 0)
    assert np.all(coverage(_result(estimates, 0.0))['standard_error'].values == 0)


def test_coverage_counts():
    # |e| <= 1.96 for 3 of 4 replications at unit variance
    result = _result([0.5, -1.0, 1.9, 3.0], 1.0)
    cov = coverage(result)
    assert np.allclose(cov['coverage'].values, 0.75)
    assert np.allclose(cov['standard_error'].values, np.sqrt(0.75 * 0.25 / 4))
    assert np.allclose(coverage(result, level=0.5)['coverage'].values, 0.25)


def test_coverage_skips_missing_estimators():
    covariances = np.ones((4, 3, 1, 1))
    covariances[:, 1] = np.nan
    result = MonteCarloResult.from_arrays([0.0], np.zeros((4, 1)), covariances)
    cov = coverage(result)
    assert cov['coverage'].sel(estimator='naive').item() == 1
    assert np.isnan(cov['coverage'].sel(estimator='corrected_score').item())
    doc = result.to_dict()
    assert doc['coverage']['corrected_score'] == [None]
    json.dumps(doc, allow_nan=False)


def test_result_summaries():
    estimates = np.array([[1.0, 0.0], [3.0, 2.0], [2.0, 1.0]])
    covariances = np.tile(np.eye(2), (3, 3, 1, 1))
    result = MonteCarloResult.from_arrays([1.0, 1.0], estimates, covariances,
                                          parameters=['psi1', 'psi0'])
    assert result.replications == 3
    assert np.allclose(result.bias.values, [1.0, 0.0])
    assert np.allclose(result.bias_se.values, [1 / np.sqrt(3)] * 2)
    assert np.allclose(result.empirical_variance.values, [[1.0, 1.0], [1.0, 1.0]])
    assert np.allclose(result.mean_variance.sel(estimator='general').values, np.eye(2))
    table = result.estimates_table()
    assert table.colnames[:3] == ['replicate', 'psi1', 'psi0']
    assert np.allclose(table['se_naive_psi1'], 1.0)
    with pytest.raises(ValueError):
        MonteCarloResult.from_arrays([0.0], np.zeros((1, 1)), np.zeros((1, 3, 1, 1)))


@pytest.fixture(scope='module')
def small_run():
    cfg = default_scenario('S1', n=200)
    estimator = IPTWEstimator(LogisticSpec(COVARIATES))
    return cfg, estimator, run_replications(cfg, estimator, 5, master_seed=3)


def test_run_replications(small_run):
    cfg, _, result = small_run
    assert result.replications == 5
    assert result.failed == 0
    assert result.estimates.shape == (5, 2)
    assert result.covariances.shape == (5, 3, 2, 2)
    assert list(result.estimates.parameter.values) == ['psi1', 'psi0']
    assert np.all(np.isfinite(result.diagnostics.values))
    assert np.allclose(result.truth, truth(cfg))
    json.dumps(result.to_dict(), allow_nan=False)


def test_run_replications_deterministic(small_run):
    cfg, estimator, result = small_run
    threaded = run_replications(cfg, estimator, 5, master_seed=3, threads=2)
    assert np.array_equal(result.estimates.values, threaded.estimates.values)
    assert np.array_equal(result.covariances.values, threaded.covariances.values)


def test_runs_are_paired_on_datasets(small_run):
    cfg, _, _ = small_run
    aipw = AIPWEstimator(LogisticSpec(COVARIATES), LinearOutcomeSpec(COVARIATES))
    paired = run_replications(cfg, aipw, 5, master_seed=3)
    for r in (0, 4):
        data = generate(cfg, replicate_rng(3, r))
        assert np.allclose(paired.estimates.values[r], aipw.estimate(data).psi, atol=1e-10)


def test_paired_known_theta(small_run):
    cfg, estimator, result = small_run
    estimated, known = run_replications(cfg, estimator, 5, master_seed=3,
                                        paired_known_theta=True)
    assert np.array_equal(estimated.estimates.values, result.estimates.values)
    assert np.all(np.isnan(known.diagnostics.values))
    assert estimator.known_theta is None
    with pytest.raises(ValueError):
        run_replications(cfg, AIPWEstimator(stack_outcome_model=True), 5,
                         paired_known_theta=True)


def test_snmm_replications():
    cfg = default_scenario('S2', n=200)
    estimator = SNMMEstimator(SnmmSpec(), PooledLogisticSpec(('l1',)))
    result = run_replications(cfg, estimator, 3, master_seed=1)
    assert list(result.estimates.parameter.values) == ['psi1', 'psi2', 'psi3']
    assert result.covariances.shape == (3, 3, 3, 3)


def test_too_many_failures():
    cfg = default_scenario('S1', n=100)
    # a known propensity this extreme violates positivity on every dataset
    estimator = IPTWEstimator(LogisticSpec(), known_theta=[-30.0])
    with pytest.raises(TooManyFailures):
        run_replications(cfg, estimator, 3)


def test_scenario_config_is_frozen():
    with pytest.raises(AttributeError):
        SCENARIOS['S1'].n = 10
    assert isinstance(SCENARIOS['S1'], ScenarioConfig)
