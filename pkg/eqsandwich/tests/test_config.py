import json
from pathlib import Path

import pytest

from eqsandwich.config import (BootstrapConfig, EstimatorConfig, FitConfig, ModelConfig,
                               SimulateConfig, from_dict, load_config)
from eqsandwich.eecore import SolverConfig
from eqsandwich.estimators import (AIPWEstimator, IPTWEstimator, SNMMEstimator,
                                   ScaledIPTWEstimator)
from eqsandwich.exceptions import ConfigError
from eqsandwich.nuisance_models import LogisticSpec, MomentScaleSpec, PooledLogisticSpec
from eqsandwich.simlab import default_scenario, scenario_scale_model

DATA = Path(__file__).parent.parent / 'data'


def write_config(tmp_path, doc, name='run.json'):
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return path


def test_fixture_config():
    config = load_config(DATA / 'iptw_fixture.json', 'fit')
    assert isinstance(config, FitConfig)
    assert Path(config.data) == DATA / 'iptw_fixture.csv'
    assert config.resolved_format == 'point'
    assert config.variance == ('naive', 'corrected_score', 'general')
    estimator = config.estimator.build(config.solver)
    assert isinstance(estimator, IPTWEstimator)
    assert estimator.propensity == LogisticSpec()


def test_unknown_fields(tmp_path):
    path = write_config(tmp_path, {'data': 'x.csv', 'estimator': {'estimator': 'iptw'},
                                   'alpha_level': 0.9})
    with pytest.raises(ConfigError, match='unknown field alpha_level'):
        load_config(path, 'fit')

    path = write_config(tmp_path, {'data': 'x.csv', 'estimator': {'estimator': 'iptw',
                                                                  'outcome': {'model': 'linear'}}})
    with pytest.raises(ConfigError, match='unknown field outcome'):
        load_config(path, 'fit')

    path = write_config(tmp_path, {'data': 'x.csv', 'solver': {'tolerance': 1e-3},
                                   'estimator': {'estimator': 'iptw'}})
    with pytest.raises(ConfigError, match='unknown field tolerance'):
        load_config(path, 'fit')


def test_wrong_model_type():
    with pytest.raises(ConfigError, match='logistic model'):
        EstimatorConfig.parse({'estimator': 'iptw', 'propensity': {'model': 'linear'}})
    with pytest.raises(ConfigError):
        EstimatorConfig.parse({'estimator': 'iptw', 'propensity': {'model': 'probit'}})
    with pytest.raises(ConfigError, match='estimator must be one of'):
        EstimatorConfig.parse({'estimator': 'tmle'})


def test_model_config():
    spec = ModelConfig('pooled_logistic', ['l1'], lag_treatment=True, at_risk_only=False).build()
    assert spec == PooledLogisticSpec(('l1',), lag_treatment=True, at_risk_only=False)
    assert ModelConfig('moment_scale', truncation=3.0).build() == MomentScaleSpec('l1', 3.0)
    with pytest.raises(ValueError):
        ModelConfig('logistic', columns='l1')


@pytest.mark.parametrize('doc, cls', [
    ({'estimator': 'iptw'}, IPTWEstimator),
    ({'estimator': 'aipw', 'outcome': {'model': 'linear', 'columns': ['l1']},
      'stack_outcome_model': True}, AIPWEstimator),
    ({'estimator': 'snmm', 'gamma_basis': 'duration', 'dim_psi': 1,
      'treatment': {'model': 'pooled_logistic', 'columns': ['l1']}}, SNMMEstimator),
    ({'estimator': 'scaled_iptw', 'alpha': [0, 0.8],
      'scale': {'model': 'moment_scale', 'truncation': 3}}, ScaledIPTWEstimator),
])
def test_estimator_builds(doc, cls):
    estimator = EstimatorConfig.parse(doc).build(SolverConfig(tol=1e-8))
    assert isinstance(estimator, cls)
    assert estimator.solver.tol == 1e-8


def test_invalid_estimator_options():
    config = EstimatorConfig.parse({'estimator': 'snmm', 'gamma_basis': 'duration', 'dim_psi': 2})
    with pytest.raises(ConfigError):
        config.build()
    config = EstimatorConfig.parse({'estimator': 'aipw', 'known_theta': [0.0],
                                    'stack_outcome_model': True})
    with pytest.raises(ConfigError):
        config.build()
    with pytest.raises(ConfigError, match='list of numbers'):
        EstimatorConfig.parse({'estimator': 'iptw', 'known_theta': 'zero'})


def test_data_or_scenario(tmp_path):
    both = {'data': 'x.csv', 'scenario': 'S1', 'estimator': {'estimator': 'iptw'}}
    with pytest.raises(ConfigError, match='exactly one'):
        load_config(write_config(tmp_path, both), 'fit')
    neither = {'estimator': {'estimator': 'iptw'}}
    with pytest.raises(ConfigError, match='exactly one'):
        load_config(write_config(tmp_path, neither), 'fit')


def test_scenario_config(tmp_path):
    doc = {'scenario': 'S1', 'scenario_overrides': {'n': 100},
           'estimator': {'estimator': 'iptw'}}
    config = load_config(write_config(tmp_path, doc), 'diagnose')
    scenario = config.scenario_config(seed=5)
    assert (scenario.name, scenario.n, scenario.seed) == ('S1', 100, 5)

    doc['scenario_overrides'] = {'sample_size': 100}
    with pytest.raises(ConfigError, match='scenario_overrides'):
        load_config(write_config(tmp_path, doc), 'fit')
    doc['scenario_overrides'] = {'n': 5}
    with pytest.raises(ConfigError):
        load_config(write_config(tmp_path, doc), 'fit')


def test_bootstrap_and_simulate_configs(tmp_path):
    doc = {'scenario': 'S1', 'estimator': {'estimator': 'iptw'}, 'b': 300}
    config = load_config(write_config(tmp_path, doc), 'bootstrap')
    assert isinstance(config, BootstrapConfig) and config.b == 300

    doc = {'estimator': {'estimator': 'iptw'}, 'replications': 10, 'paired_known_theta': True}
    config = load_config(write_config(tmp_path, doc), 'simulate')
    assert isinstance(config, SimulateConfig)
    assert (config.scenario, config.replications, config.paired_known_theta) == ('S1', 10, True)
    doc['replications'] = 1
    with pytest.raises(ConfigError):
        load_config(write_config(tmp_path, doc), 'simulate')


def test_variance_selection(tmp_path):
    doc = {'data': 'x.csv', 'estimator': {'estimator': 'iptw'}, 'variance': ['general']}
    assert load_config(write_config(tmp_path, doc), 'fit').variance == ('general',)
    doc['variance'] = ['bootstrap']
    with pytest.raises(ConfigError, match='unknown variance'):
        load_config(write_config(tmp_path, doc), 'fit')


def test_bad_documents(tmp_path):
    path = tmp_path / 'broken.json'
    path.write_text('{"estimator": ')
    with pytest.raises(ConfigError, match='not valid JSON'):
        load_config(path, 'fit')
    with pytest.raises(ConfigError, match='needs an estimator'):
        load_config(write_config(tmp_path, {'data': 'x.csv'}), 'fit')
    with pytest.raises(ConfigError, match='JSON object'):
        load_config(write_config(tmp_path, ['iptw']), 'fit')
    with pytest.raises(ConfigError):
        from_dict(SolverConfig, {'tol': -1.0})


def test_shipped_s1_config():
    config = load_config(DATA / 's1_simulate.json', 'simulate')
    assert config.scenario == 'S1' and config.paired_known_theta
    estimator = config.estimator.build(config.solver)
    assert isinstance(estimator, IPTWEstimator)
    assert estimator.propensity == LogisticSpec(('l1', 'l2'))


def test_shipped_s2_config():
    config = load_config(DATA / 's2_simulate.json', 'simulate')
    estimator = config.estimator.build(config.solver)
    assert isinstance(estimator, SNMMEstimator)
    assert estimator.treatment == PooledLogisticSpec(('l1',))
    assert estimator.snmm.dim_psi == len(default_scenario('S2').psi)


def test_shipped_s3_config_matches_scenario():
    config = load_config(DATA / 's3_simulate.json', 'simulate')
    scenario = default_scenario('S3')
    estimator = config.estimator.build(config.solver)
    assert isinstance(estimator, ScaledIPTWEstimator)
    assert estimator.alpha == scenario.theta
    assert estimator.scale == scenario_scale_model(scenario)
