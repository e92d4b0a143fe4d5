"""
JSON run configurations for the command line.

A run config is one JSON document. Estimator and model specs are nested
objects, for example::

    {"data": "iptw_fixture.csv",
     "estimator": {"estimator": "iptw",
                   "propensity": {"model": "logistic", "columns": ["l1"], "intercept": true}},
     "solver": {"tol": 1e-10},
     "level": 0.95}

Every object is checked against its dataclass before anything is computed;
unknown keys raise `~eqsandwich.exceptions.ConfigError`.
"""
import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional, Tuple

from eqsandwich.eecore import SolverConfig
from eqsandwich.estimators import (AIPWEstimator, IPTWEstimator, ScaledIPTWEstimator,
                                   SNMMEstimator, SnmmSpec)
from eqsandwich.exceptions import ConfigError
from eqsandwich.nuisance_models import (LinearOutcomeSpec, LogisticSpec, MomentScaleSpec,
                                        PooledLogisticSpec)
from eqsandwich.simlab import default_scenario
from eqsandwich.variance import ESTIMATORS

__all__ = ['ModelConfig', 'EstimatorConfig', 'FitConfig', 'BootstrapConfig', 'SimulateConfig',
           'DiagnoseConfig', 'from_dict', 'load_config']

MODELS = ('logistic', 'pooled_logistic', 'linear', 'moment_scale')

# fields each estimator accepts besides ``estimator`` itself
ESTIMATOR_FIELDS = {
    'iptw': {'propensity', 'known_theta'},
    'aipw': {'propensity', 'outcome', 'known_theta', 'known_xi', 'stack_outcome_model'},
    'snmm': {'treatment', 'known_theta', 'gamma_basis', 'dim_psi', 'horizon'},
    'scaled_iptw': {'scale', 'alpha', 'known_theta'},
}


def from_dict(cls, doc, where=None, nested=None):
    """
    Build dataclass ``cls`` from a JSON object, rejecting unknown keys.

    Parameters
    ----------
    cls : type
        A dataclass.
    doc : dict
    where : str, optional
        Location of ``doc`` in the config, for error messages.
    nested : dict, optional
        Maps field names to callables converting the nested JSON value.
    """
    where = where or cls.__name__
    if not isinstance(doc, dict):
        raise ConfigError(f'{where} must be a JSON object, got {type(doc).__name__}.')
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ConfigError(f'unknown field {", ".join(unknown)} in {where}; '
                          f'allowed: {", ".join(sorted(known))}.')
    kwargs = dict(doc)
    for name, convert in (nested or {}).items():
        if kwargs.get(name) is not None:
            kwargs[name] = convert(kwargs[name], f'{where}.{name}')
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as err:
        raise ConfigError(f'Invalid {where}: {err}') from err


def _solver(doc, where):
    return from_dict(SolverConfig, doc, where)


def _vector(values, where):
    if values is None:
        return None
    if not isinstance(values, list) or not all(isinstance(v, (int, float)) for v in values):
        raise ConfigError(f'{where} must be a list of numbers.')
    return tuple(float(v) for v in values)


@dataclass(frozen=True)
class ModelConfig:
    """
    Nuisance model spec ``{"model": ..., ...}``.

    ``columns``, ``intercept`` apply to ``logistic``, ``pooled_logistic`` and
    ``linear``; ``lag_treatment`` and ``at_risk_only`` to ``pooled_logistic``;
    ``column`` and ``truncation`` to ``moment_scale``.
    """
    model: str
    columns: Tuple[str, ...] = ()
    intercept: bool = True
    lag_treatment: bool = False
    at_risk_only: bool = True
    column: str = 'l1'
    truncation: Optional[float] = None

    def __post_init__(self):
        if self.model not in MODELS:
            raise ValueError(f'unknown model {self.model}; use one of {", ".join(MODELS)}')
        if isinstance(self.columns, str):
            raise ValueError('columns must be a list of column names')
        object.__setattr__(self, 'columns', tuple(self.columns))

    def build(self):
        if self.model == 'logistic':
            return LogisticSpec(self.columns, self.intercept)
        if self.model == 'pooled_logistic':
            return PooledLogisticSpec(self.columns, self.lag_treatment, self.intercept,
                                      self.at_risk_only)
        if self.model == 'linear':
            return LinearOutcomeSpec(self.columns, self.intercept)
        return MomentScaleSpec(self.column, self.truncation)


def _model(expected):
    def convert(doc, where):
        model = from_dict(ModelConfig, doc, where)
        if model.model != expected:
            raise ConfigError(f'{where} must be a {expected} model, got {model.model}.')
        return model
    return convert


@dataclass(frozen=True)
class EstimatorConfig:
    """
    Estimator spec ``{"estimator": "iptw" | "aipw" | "snmm" | "scaled_iptw", ...}``.
    """
    estimator: str
    propensity: Optional[ModelConfig] = None
    outcome: Optional[ModelConfig] = None
    treatment: Optional[ModelConfig] = None
    scale: Optional[ModelConfig] = None
    known_theta: Optional[Tuple[float, ...]] = None
    known_xi: Optional[Tuple[float, ...]] = None
    stack_outcome_model: bool = False
    gamma_basis: str = 'duration_quadratic_in_m'
    dim_psi: int = 3
    horizon: Optional[int] = None
    alpha: Tuple[float, ...] = (0.0, 1.0)

    @classmethod
    def parse(cls, doc, where='estimator'):
        if isinstance(doc, dict):
            name = doc.get('estimator')
            if name not in ESTIMATOR_FIELDS:
                raise ConfigError(f'{where}.estimator must be one of '
                                  f'{", ".join(ESTIMATOR_FIELDS)}, got {name!r}.')
            extra = sorted(set(doc) - ESTIMATOR_FIELDS[name] - {'estimator'})
            if extra:
                raise ConfigError(f'unknown field {", ".join(extra)} in {where} '
                                  f'for estimator {name}.')
        return from_dict(cls, doc, where, nested={
            'propensity': _model('logistic'), 'outcome': _model('linear'),
            'treatment': _model('pooled_logistic'), 'scale': _model('moment_scale'),
            'known_theta': _vector, 'known_xi': _vector, 'alpha': _vector})

    def build(self, solver=None):
        """
        Instantiate the `~eqsandwich.estimators.Estimator`.
        """
        def spec(model):
            return None if model is None else model.build()

        try:
            if self.estimator == 'iptw':
                return IPTWEstimator(spec(self.propensity), self.known_theta, solver)
            if self.estimator == 'aipw':
                return AIPWEstimator(spec(self.propensity), spec(self.outcome), self.known_theta,
                                     self.known_xi, self.stack_outcome_model, solver)
            if self.estimator == 'snmm':
                snmm = SnmmSpec(self.gamma_basis, self.dim_psi, horizon=self.horizon)
                return SNMMEstimator(snmm, spec(self.treatment), self.known_theta, solver)
            return ScaledIPTWEstimator(self.alpha, spec(self.scale), self.known_theta, solver)
        except ValueError as err:
            raise ConfigError(f'Invalid estimator: {err}') from err

    @property
    def data_format(self):
        return 'longitudinal' if self.estimator == 'snmm' else 'point'


def _estimator(doc, where):
    return EstimatorConfig.parse(doc, where)


@dataclass(frozen=True)
class FitConfig:
    """
    Config of ``fit`` and ``diagnose``.

    Exactly one of ``data`` (a CSV path, relative to the config file) and
    ``scenario`` (a builtin scenario simulated with ``--seed``) is required.
    """
    estimator: EstimatorConfig
    data: Optional[str] = None
    data_format: Optional[str] = None
    scenario: Optional[str] = None
    scenario_overrides: dict = field(default_factory=dict)
    solver: SolverConfig = field(default_factory=SolverConfig)
    variance: Tuple[str, ...] = ESTIMATORS
    level: float = 0.95

    def __post_init__(self):
        if (self.data is None) == (self.scenario is None):
            raise ValueError('give exactly one of data and scenario')
        if self.data_format not in (None, 'point', 'longitudinal'):
            raise ValueError(f'data_format must be point or longitudinal, got {self.data_format}')
        unknown = sorted(set(self.variance) - set(ESTIMATORS))
        if unknown:
            raise ValueError(f'unknown variance estimator {", ".join(unknown)}')
        object.__setattr__(self, 'variance', tuple(self.variance))
        if not 0 < self.level < 1:
            raise ValueError(f'level must be in (0, 1), got {self.level}')
        if self.scenario is not None:
            self.scenario_config()

    @property
    def resolved_format(self):
        return self.data_format or self.estimator.data_format

    def scenario_config(self, seed=None):
        overrides = dict(self.scenario_overrides)
        if seed is not None:
            overrides['seed'] = seed
        try:
            return default_scenario(self.scenario, **overrides)
        except TypeError as err:
            raise ConfigError(f'unknown field in scenario_overrides: {err}') from err
        except ValueError as err:
            raise ConfigError(str(err)) from err


DiagnoseConfig = FitConfig


@dataclass(frozen=True)
class BootstrapConfig(FitConfig):
    """
    Config of ``bootstrap``; ``b`` and ``level`` can be overridden on the command line.
    """
    b: int = 500


@dataclass(frozen=True)
class SimulateConfig:
    """
    Config of ``simulate``: a builtin scenario, an estimator and the replication count.
    """
    estimator: EstimatorConfig
    scenario: str = 'S1'
    scenario_overrides: dict = field(default_factory=dict)
    replications: int = 1000
    solver: SolverConfig = field(default_factory=SolverConfig)
    level: float = 0.95
    paired_known_theta: bool = False

    def __post_init__(self):
        if self.replications < 2:
            raise ValueError('replications must be at least 2')
        if not 0 < self.level < 1:
            raise ValueError(f'level must be in (0, 1), got {self.level}')
        self.scenario_config()

    scenario_config = FitConfig.scenario_config


_NESTED = {'estimator': _estimator, 'solver': _solver,
           'variance': lambda values, where: tuple(values)}


def load_config(path, kind):
    """
    Read and validate a JSON run config.

    Parameters
    ----------
    path : str or `pathlib.Path`
    kind : {'fit', 'diagnose', 'bootstrap', 'simulate'}

    Returns
    -------
    config
        The dataclass for ``kind``; a relative ``data`` path is resolved
        against the config file's directory.

    Raises
    ------
    ConfigError
        If the file is not valid JSON or does not match the schema.
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as err:
        raise ConfigError(f'{path} is not valid JSON: {err}') from err
    cls = {'fit': FitConfig, 'diagnose': DiagnoseConfig, 'bootstrap': BootstrapConfig,
           'simulate': SimulateConfig}[kind]
    if isinstance(doc, dict) and 'estimator' not in doc:
        raise ConfigError(f'{kind} config needs an estimator.')
    config = from_dict(cls, doc, kind, nested=_NESTED)
    if getattr(config, 'data', None) is not None and not Path(config.data).is_absolute():
        config = replace(config, data=str(path.parent / config.data))
    return config
