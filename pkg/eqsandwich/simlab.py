"""
Simulated scenarios with counterfactual oracles and the Monte Carlo runner.

Default scenarios:

* ``S1`` point treatment with two confounders and true ATE 1;
* ``S2`` longitudinal, horizon 3, treatment initiation effect
  ``(k - m)(psi1 + psi2 m + psi3 m^2)`` with ``psi = (1, -0.2, 0)``;
* ``S3`` point treatment whose propensity depends on the scale of the
  confounder, estimated by the method of moments (not a score).

All truth values are generator inputs. Generators take a
`numpy.random.Generator`; `run_replications` derives one per replication from
``(master_seed, r)`` so two runs with the same seed see the same datasets.
"""
import copy
from dataclasses import asdict, dataclass, replace
from typing import Tuple

import numpy as np
import xarray
from astropy.table import Table
from scipy import stats
from scipy.special import expit

from eqsandwich import log
from eqsandwich.bootstrap import parallel_map
from eqsandwich.constants import Thresholds
from eqsandwich.datasets import Dataset, LongitudinalDataset
from eqsandwich.exceptions import EstimationError, TooManyFailures
from eqsandwich.nuisance_models import MomentScaleSpec
from eqsandwich.streams import replicate_rng
from eqsandwich.variance import ESTIMATORS

__all__ = ['ScenarioConfig', 'default_scenario', 'SCENARIOS', 'truth', 'true_theta',
           'true_outcome_coefficients', 'scenario_scale_model', 'generate',
           'gen_point_treatment', 'gen_longitudinal', 'gen_mom_nuisance', 'MonteCarloResult',
           'run_replications', 'coverage']

GENERATORS = ('point_treatment', 'longitudinal', 'mom_nuisance')


@dataclass(frozen=True)
class ScenarioConfig:
    """
    Simulation scenario.

    Parameters
    ----------
    name : str
    n : int
        Sample size (subjects or persons), at least 50.
    generator : {'point_treatment', 'longitudinal', 'mom_nuisance'}
    theta : tuple of float
        True propensity coefficients: ``(intercept, l1, l2)`` for point
        treatment, ``(alpha0, alpha1)`` on the current covariate for
        longitudinal data, ``(alpha0, alpha1)`` on the standardised covariate
        for ``mom_nuisance``.
    psi : tuple of float
        ``(ate,)`` for point treatment scenarios, the effect parameters
        ``(psi1, psi2, psi3)`` for longitudinal data.
    confounding : float
        Multiplies the covariate coefficients of the propensity model.
    horizon : int
        Last decision time K of longitudinal data, at most 10.
    outcome_intercept : float
    outcome_coefficients : tuple of float
        Outcome coefficients on the covariates.
    effect_modification : float
        Extra coefficient on ``l1`` under treatment.
    noise_sd : float
    scale : float
        Scale of the confounder in ``mom_nuisance``.
    truncation : float
        Covariates of point treatment scenarios are standard normal truncated
        to ``[-truncation, truncation]``; longitudinal covariates are clipped
        to ``[-truncation, truncation]``.
    covariate_shift : float
        Shift of longitudinal covariates once treated.
    seed : int
    """
    name: str = 'S1'
    n: int = 2000
    generator: str = 'point_treatment'
    theta: Tuple[float, ...] = (0.0, 0.4, -0.4)
    psi: Tuple[float, ...] = (1.0,)
    confounding: float = 1.0
    horizon: int = 3
    outcome_intercept: float = 0.0
    outcome_coefficients: Tuple[float, ...] = (1.0, 1.0)
    effect_modification: float = 0.0
    noise_sd: float = 1.0
    scale: float = 2.0
    truncation: float = 3.0
    covariate_shift: float = 0.3
    seed: int = 0

    def __post_init__(self):
        for name in ('theta', 'psi', 'outcome_coefficients'):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        thresholds = Thresholds()
        if self.generator not in GENERATORS:
            raise ValueError(f'Unknown generator {self.generator}; use one of {GENERATORS}.')
        if self.n < thresholds.get('scenario_min_n'):
            raise ValueError(f'n must be at least {thresholds.get("scenario_min_n")}.')
        if self.generator == 'longitudinal' and not 0 <= self.horizon <= thresholds.get('max_horizon'):
            raise ValueError(f'horizon must be in [0, {thresholds.get("max_horizon")}].')
        expected = {'point_treatment': 3, 'longitudinal': 2, 'mom_nuisance': 2}[self.generator]
        if len(self.theta) != expected:
            raise ValueError(f'{self.generator} needs {expected} propensity coefficients.')
        if self.generator == 'longitudinal' and not 1 <= len(self.psi) <= 3:
            raise ValueError('Longitudinal scenarios take 1 to 3 effect parameters.')
        if self.generator != 'longitudinal' and len(self.psi) != 1:
            raise ValueError('Point treatment scenarios take one effect parameter, the ATE.')
        if self.scale <= 0 or self.noise_sd < 0 or self.truncation <= 0:
            raise ValueError('scale and truncation must be positive, noise_sd non-negative.')

        bound = thresholds.get('scenario_min_propensity')
        low, high = self._linear_predictor_range()
        if expit(low) < bound or expit(high) > 1 - bound:
            raise ValueError(f'Scenario propensities reach [{expit(low):.3f}, {expit(high):.3f}], '
                             f'outside [{bound}, {1 - bound}].')

    def _linear_predictor_range(self):
        theta = np.asarray(self.theta)
        slopes = np.abs(theta[1:]) * (self.confounding if self.generator == 'point_treatment'
                                      else 1.0)
        spread = self.truncation * slopes.sum()
        return theta[0] - spread, theta[0] + spread

    def to_dict(self):
        return asdict(self)


SCENARIOS = {
    'S1': ScenarioConfig(),
    'S2': ScenarioConfig(name='S2', n=1000, generator='longitudinal', theta=(-1.0, 0.5),
                         psi=(1.0, -0.2, 0.0), horizon=3, truncation=3.5),
    'S3': ScenarioConfig(name='S3', generator='mom_nuisance', theta=(0.0, 0.8),
                         outcome_coefficients=(1.0,), scale=2.0),
}


def default_scenario(name, **overrides):
    """
    One of the builtin scenarios ``S1``, ``S2``, ``S3`` with optional field overrides.
    """
    if name not in SCENARIOS:
        raise ValueError(f'Unknown scenario {name}; use one of {sorted(SCENARIOS)}.')
    return replace(SCENARIOS[name], **overrides)


def truth(cfg):
    """
    True parameter of interest: ``(psi1, psi0)`` means, or the SNMM effect parameters.
    """
    if cfg.generator == 'longitudinal':
        return np.array(cfg.psi)
    return np.array([cfg.outcome_intercept + cfg.psi[0], cfg.outcome_intercept])


def true_theta(cfg):
    """
    True nuisance: propensity coefficients, or the covariate scale for ``mom_nuisance``.
    """
    if cfg.generator == 'point_treatment':
        return np.array([cfg.theta[0], cfg.confounding * cfg.theta[1],
                         cfg.confounding * cfg.theta[2]])
    if cfg.generator == 'mom_nuisance':
        return np.array([cfg.scale])
    return np.array(cfg.theta)


def true_outcome_coefficients(cfg):
    """
    True ``(xi_1, xi_0)`` of per-arm linear outcome models on ``(1, l1, l2)``.
    """
    if cfg.generator != 'point_treatment':
        raise ValueError('Outcome model coefficients are defined for point treatment only.')
    beta = np.asarray(cfg.outcome_coefficients)
    treated = np.concatenate([[cfg.outcome_intercept + cfg.psi[0]],
                              beta + np.array([cfg.effect_modification, 0.0])])
    control = np.concatenate([[cfg.outcome_intercept], beta])
    return np.concatenate([treated, control])


def scenario_scale_model(cfg):
    """
    Moment scale model matching the covariate law of a ``mom_nuisance`` scenario.
    """
    return MomentScaleSpec(column='l1', truncation=cfg.truncation)


def _truncated_normal(cfg, rng, size):
    return stats.truncnorm.rvs(-cfg.truncation, cfg.truncation, size=size, random_state=rng)


def gen_point_treatment(cfg, rng=None):
    """
    Point treatment data with potential outcomes in oracle columns.

    ``L`` is bivariate standard normal truncated to ``[-truncation, truncation]``,
    ``A ~ Bernoulli(expit(theta^T (1, L)))`` and ``Y = Y^(A)`` with
    ``Y^(a) = b0 + a ate + beta^T L + a em L1 + noise``.

    Returns
    -------
    `~eqsandwich.datasets.Dataset`
        Columns ``y, a, l1, l2``; oracle columns ``y1, y0, propensity``.
    """
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    l = _truncated_normal(cfg, rng, (cfg.n, 2))
    theta = true_theta(cfg)
    propensity = expit(theta[0] + l @ theta[1:])
    a = (rng.uniform(size=cfg.n) < propensity).astype(float)

    noise = cfg.noise_sd * rng.standard_normal(cfg.n)
    beta = np.asarray(cfg.outcome_coefficients)
    y0 = cfg.outcome_intercept + l @ beta + noise
    y1 = y0 + cfg.psi[0] + cfg.effect_modification * l[:, 0]
    y = np.where(a == 1, y1, y0)
    return Dataset({'y': y, 'a': a, 'l1': l[:, 0], 'l2': l[:, 1]},
                   oracle={'y1': y1, 'y0': y0, 'propensity': propensity})


def gen_mom_nuisance(cfg, rng=None):
    """
    Point treatment data whose propensity depends on the confounder's scale.

    ``L = scale Z`` with Z truncated standard normal, ``A ~ Bernoulli(expit(alpha0 +
    alpha1 L / scale))`` and ``Y^(a) = b0 + a ate + beta L / scale + noise``.
    ``scenario_scale_model(cfg)`` recovers the scale by the method of moments.
    """
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    z = _truncated_normal(cfg, rng, cfg.n)
    propensity = expit(cfg.theta[0] + cfg.theta[1] * z)
    a = (rng.uniform(size=cfg.n) < propensity).astype(float)

    noise = cfg.noise_sd * rng.standard_normal(cfg.n)
    y0 = cfg.outcome_intercept + cfg.outcome_coefficients[0] * z + noise
    y1 = y0 + cfg.psi[0]
    y = np.where(a == 1, y1, y0)
    return Dataset({'y': y, 'a': a, 'l1': cfg.scale * z},
                   oracle={'y1': y1, 'y0': y0, 'propensity': propensity})


def _gamma(cfg, start, k):
    basis = np.stack([start ** j for j in range(len(cfg.psi))], axis=-1)
    return np.clip(k - start, 0, None) * (basis @ np.asarray(cfg.psi))


def gen_longitudinal(cfg, rng=None):
    """
    Longitudinal data with absorbing treatment initiation.

    A latent prognosis ``U ~ N(0, 1)`` drives both the covariates
    ``L_k = clip(U + e_k + shift 1{treated before k})`` and the untreated outcomes
    ``Y_k^(0) = U + 0.2 k + noise``. While at risk, ``A_k ~ Bernoulli(expit(alpha0 +
    alpha1 L_k))``. Observed outcomes add the effect of the realised start time.

    Returns
    -------
    `~eqsandwich.datasets.LongitudinalDataset`
        Oracles: ``y_never`` (n, K+2) and ``y_start`` (n, K+1, K+2), the outcomes
        had treatment started at each m.
    """
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    n, horizon = cfg.n, cfg.horizon
    prognosis = rng.standard_normal(n)
    y_never = (prognosis[:, np.newaxis] + 0.2 * np.arange(horizon + 2)
               + cfg.noise_sd * rng.standard_normal((n, horizon + 2)))

    l = np.zeros((n, horizon + 1))
    a = np.zeros((n, horizon + 1))
    treated = np.zeros(n, dtype=bool)
    for k in range(horizon + 1):
        noise = 0.5 * rng.standard_normal(n)
        l[:, k] = np.clip(prognosis + noise + cfg.covariate_shift * treated,
                          -cfg.truncation, cfg.truncation)
        start = rng.uniform(size=n) < expit(cfg.theta[0] + cfg.theta[1] * l[:, k])
        treated = treated | start
        a[:, k] = treated

    first = np.where(a.any(axis=1), a.argmax(axis=1), horizon + 1).astype(float)
    outcome_times = np.arange(horizon + 2)
    y = y_never + _gamma(cfg, first[:, np.newaxis], outcome_times)
    y_start = np.stack([y_never + _gamma(cfg, np.full((n, 1), float(m)), outcome_times)
                        for m in range(horizon + 1)], axis=1)
    return LongitudinalDataset(y, a, l[:, :, np.newaxis], covariate_names=['l1'],
                               oracle={'y_never': y_never, 'y_start': y_start})


def generate(cfg, rng=None):
    """
    Dispatch on ``cfg.generator``.
    """
    return {'point_treatment': gen_point_treatment, 'longitudinal': gen_longitudinal,
            'mom_nuisance': gen_mom_nuisance}[cfg.generator](cfg, rng)


@dataclass(frozen=True, eq=False)
class MonteCarloResult:
    """
    Replicated fits of one estimator on one scenario.

    Attributes
    ----------
    scenario, estimator : str
    truth : `numpy.ndarray`
    estimates : `xarray.DataArray`
        dims ``(replicate, parameter)``.
    covariances : `xarray.DataArray`
        dims ``(replicate, estimator, parameter, parameter2)``; NaN where an
        estimator does not apply.
    correction : `xarray.DataArray`
        dims ``(replicate, parameter, parameter2)``.
    diagnostics : `xarray.DataArray`
        dims ``(replicate, gap)``.
    failed : int
        Replications dropped because the fit failed.
    """
    scenario: str
    estimator: str
    truth: np.ndarray
    estimates: xarray.DataArray
    covariances: xarray.DataArray
    correction: xarray.DataArray
    diagnostics: xarray.DataArray
    failed: int = 0

    @classmethod
    def from_arrays(cls, truth, estimates, covariances, correction=None, diagnostics=None,
                    estimators=ESTIMATORS, parameters=None, scenario='custom',
                    estimator='custom', failed=0):
        """
        Assemble a result from plain arrays of shapes ``(R, p)`` and ``(R, E, p, p)``.
        """
        estimates = np.asarray(estimates, dtype=float)
        covariances = np.asarray(covariances, dtype=float)
        r, p = estimates.shape
        if r < 2:
            raise ValueError('A Monte Carlo result needs at least two replications.')
        parameters = list(parameters or [f'psi{j + 1}' for j in range(p)])
        replicates = np.arange(r)
        if correction is None:
            correction = np.zeros((r, p, p))
        if diagnostics is None:
            diagnostics = np.zeros((r, 3))
        return cls(
            scenario=scenario, estimator=estimator, truth=np.asarray(truth, dtype=float),
            estimates=xarray.DataArray(estimates, dims=['replicate', 'parameter'],
                                       coords={'replicate': replicates, 'parameter': parameters}),
            covariances=xarray.DataArray(
                covariances, dims=['replicate', 'estimator', 'parameter', 'parameter2'],
                coords={'replicate': replicates, 'estimator': list(estimators),
                        'parameter': parameters, 'parameter2': parameters}),
            correction=xarray.DataArray(
                np.asarray(correction, dtype=float), dims=['replicate', 'parameter', 'parameter2'],
                coords={'replicate': replicates, 'parameter': parameters,
                        'parameter2': parameters}),
            diagnostics=xarray.DataArray(
                np.asarray(diagnostics, dtype=float), dims=['replicate', 'gap'],
                coords={'replicate': replicates,
                        'gap': ['ddtheta_gap', 'fisher_gap', 'orthogonality_gap']}),
            failed=failed)

    @property
    def replications(self):
        return self.estimates.sizes['replicate']

    @property
    def bias(self):
        return self.estimates.mean('replicate') - self.truth

    @property
    def bias_se(self):
        return self.estimates.std('replicate', ddof=1) / np.sqrt(self.replications)

    @property
    def empirical_variance(self):
        """
        ``(p, p)`` sample covariance of the estimates across replications.
        """
        values = np.atleast_2d(np.cov(self.estimates.values, rowvar=False, ddof=1))
        return xarray.DataArray(values, dims=['parameter', 'parameter2'],
                                coords={'parameter': self.estimates.parameter.values,
                                        'parameter2': self.estimates.parameter.values})

    @property
    def mean_variance(self):
        """
        Average of each variance estimator, dims ``(estimator, parameter, parameter2)``.
        """
        return self.covariances.mean('replicate')

    def to_dict(self, level=0.95):
        cov = coverage(self, level)
        empirical = np.diag(self.empirical_variance.values)
        mean_variance = {}
        for name in self.covariances.estimator.values:
            diag = np.diag(self.mean_variance.sel(estimator=name).values)
            mean_variance[str(name)] = {'diagonal': _listed(diag),
                                        'ratio_to_empirical': _listed(diag / empirical)}
        return {
            'scenario': self.scenario, 'estimator': self.estimator,
            'replications': int(self.replications), 'failed': int(self.failed),
            'parameters': [str(p) for p in self.estimates.parameter.values],
            'truth': self.truth.tolist(), 'mean_estimate': _listed(self.estimates.mean('replicate')),
            'bias': _listed(self.bias), 'bias_se': _listed(self.bias_se),
            'empirical_variance': self.empirical_variance.values.tolist(),
            'mean_variance': mean_variance,
            'mean_correction_ratio': _scalar(np.mean(
                np.max(np.abs(self.correction.values), axis=(1, 2))
                / np.max(np.abs(self.covariances.sel(estimator='naive').values), axis=(1, 2)))),
            'mean_diagnostics': {str(g): _scalar(v) for g, v in
                                 zip(self.diagnostics.gap.values,
                                     self.diagnostics.mean('replicate').values)},
            'level': level,
            'coverage': {str(name): _listed(cov['coverage'].sel(estimator=name))
                         for name in cov.estimator.values},
            'coverage_se': {str(name): _listed(cov['standard_error'].sel(estimator=name))
                            for name in cov.estimator.values},
        }

    def estimates_table(self):
        """
        Per-replication estimates and standard errors as an `astropy.table.Table`.
        """
        table = Table()
        table['replicate'] = self.estimates.replicate.values
        for parameter in self.estimates.parameter.values:
            table[str(parameter)] = self.estimates.sel(parameter=parameter).values
        for name in self.covariances.estimator.values:
            for parameter in self.estimates.parameter.values:
                variance = self.covariances.sel(estimator=name, parameter=parameter,
                                                parameter2=parameter).values
                table[f'se_{name}_{parameter}'] = np.sqrt(variance)
        return table


def _scalar(value):
    value = float(value)
    return value if np.isfinite(value) else None


def _listed(values):
    return [None if not np.isfinite(v) else float(v) for v in np.asarray(values).ravel()]


def _replication_record(fit):
    report = fit.report
    blocks = [getattr(report, name) for name in ESTIMATORS]
    p = fit.params.p
    covariances = np.stack([np.full((p, p), np.nan) if block is None else block
                            for block in blocks])
    diag = report.diagnostics
    gaps = [diag.ddtheta_gap, diag.fisher_gap, diag.orthogonality_gap]
    if not diag.applicable:
        gaps = [np.nan] * 3
    return fit.params.psi, covariances, report.correction, gaps


def run_replications(cfg, estimator, R, master_seed=0, threads=1, paired_known_theta=False):
    """
    Fit ``estimator`` on ``R`` independent datasets from ``cfg``.

    Replication ``r`` draws its dataset from the stream keyed by
    ``(master_seed, r)``: runs of different estimators with the same seed are
    paired on identical datasets.

    Parameters
    ----------
    cfg : `ScenarioConfig`
    estimator : `~eqsandwich.estimators.Estimator`
    R : int
    master_seed : int
    threads : int
    paired_known_theta : bool
        Also run a copy of ``estimator`` with the nuisance fixed at
        `true_theta` on the same datasets.

    Returns
    -------
    `MonteCarloResult`
        Or a pair ``(estimated, known)`` of results when ``paired_known_theta``.

    Raises
    ------
    TooManyFailures
        If more than 2% of the replications fail.
    """
    if R < 2:
        raise ValueError('R must be at least 2.')
    if paired_known_theta:
        if getattr(estimator, 'stack_outcome_model', False):
            raise ValueError('A stacked outcome model cannot be paired with a known theta.')
        known = copy.copy(estimator)
        known.known_theta = true_theta(cfg)
        return (run_replications(cfg, estimator, R, master_seed, threads),
                run_replications(cfg, known, R, master_seed, threads))

    def replication(r):
        data = generate(cfg, replicate_rng(master_seed, r))
        try:
            return _replication_record(estimator.fit(data))
        except EstimationError as err:
            log.warning(f'Replication {r} failed: {type(err).__name__}: {err}')
            return None

    log.info(f'Running {R} replications of {estimator.name} on scenario {cfg.name} (n={cfg.n})')
    records = [record for record in parallel_map(replication, range(R), threads)
               if record is not None]
    failed = R - len(records)
    if failed > Thresholds().get('failure_cap') * R:
        raise TooManyFailures(f'{failed} of {R} replications failed.')
    if len(records) < 2:
        raise TooManyFailures('Fewer than two replications succeeded.')

    psi, covariances, correction, gaps = (np.array(values) for values in zip(*records))
    names = None
    if estimator.contrast is not None:
        names = ['psi1', 'psi0']
    return MonteCarloResult.from_arrays(truth(cfg), psi, covariances, correction, gaps,
                                        parameters=names, scenario=cfg.name,
                                        estimator=estimator.name, failed=failed)


def coverage(result, level=0.95):
    """
    Wald interval coverage of the truth per variance estimator and component.

    Returns
    -------
    `xarray.Dataset`
        ``coverage`` and its binomial ``standard_error``, dims ``(estimator, parameter)``.
    """
    if not 0 < level < 1:
        raise ValueError(f'level must be in (0, 1), got {level}.')
    z = stats.norm.ppf(0.5 + level / 2)
    variances = xarray.DataArray(
        np.clip(np.diagonal(result.covariances.values, axis1=2, axis2=3), 0, None),
        dims=['replicate', 'estimator', 'parameter'],
        coords={'replicate': result.covariances.replicate.values,
                'estimator': result.covariances.estimator.values,
                'parameter': result.covariances.parameter.values})
    error = np.abs(result.estimates - xarray.DataArray(result.truth, dims=['parameter']))
    covered = (error <= z * np.sqrt(variances)).where(np.isfinite(variances))
    proportion = covered.mean('replicate')
    standard_error = np.sqrt(proportion * (1 - proportion) / covered.count('replicate'))
    return xarray.Dataset({'coverage': proportion, 'standard_error': standard_error},
                          attrs={'level': level})
