"""
Builtin estimating functions and two-stage estimator pipelines.

* IPTW means ``(psi1, psi0)`` of the treated and untreated potential outcomes
  with a logistic propensity nuisance;
* AIPW (doubly robust) means with per-arm linear outcome models;
* coarse structural nested mean model g-estimation for longitudinal data with
  a pooled logistic nuisance for treatment initiation;
* IPTW with a method-of-moments scale nuisance, whose nuisance equation is not
  a score.

An estimator pipeline fits the nuisance, solves for psi and reports every
variance estimate.
"""
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.linalg
from scipy.special import expit

from eqsandwich import log
from eqsandwich.constants import Thresholds
from eqsandwich.eecore import (EstimatingFunctionSet, ParamVector, SolverConfig,
                               empirical_moments, fix_theta, solve_profile)
from eqsandwich.exceptions import Positivity
from eqsandwich.nuisance_models import (LinearOutcomeSpec, LogisticSpec, MomentScaleSpec,
                                        PooledLogisticSpec, check_separation, fit_logistic,
                                        fit_moment_scale, fit_outcome_model, fit_pooled_logistic,
                                        logistic_probability, logistic_score,
                                        logistic_score_jacobian, moment_scale_score,
                                        outcome_predictions, outcome_score,
                                        outcome_score_jacobian, pooled_design,
                                        pooled_logistic_probability, pooled_logistic_score,
                                        pooled_logistic_score_jacobian)
from eqsandwich.variance import contrast_variance, variance_report, wald_intervals

__all__ = ['iptw_u1', 'aipw_u1', 'scaled_propensity', 'SnmmSpec', 'snmm_h', 'snmm_h_matrix',
           'snmm_u1', 'ate', 'FitResult', 'Estimator', 'FunctionSetEstimator',
           'IPTWEstimator', 'AIPWEstimator', 'SNMMEstimator', 'ScaledIPTWEstimator']

ATE_CONTRAST = (1.0, -1.0)


def _check_positivity(p, label='propensity'):
    floor = Thresholds().get('positivity_floor')
    if np.any((p < floor) | (p > 1 - floor)):
        raise Positivity(f'{label} outside [{floor}, {1 - floor}]: min {np.min(p):.3g}, '
                         f'max {np.max(p):.3g}.')
    return p


def _ipw_rows(psi, p, data):
    a, y = data['a'], data['y']
    return np.column_stack([a / p * (y - psi[0]), (1 - a) / (1 - p) * (y - psi[1])])


def _ipw_d_psi(p, data):
    a = data['a']
    return np.diag([-np.mean(a / p), -np.mean((1 - a) / (1 - p))])


def iptw_u1(psi, theta, data, model):
    """
    IPTW estimating function ``(A/p (Y - psi1), (1-A)/(1-p) (Y - psi0))`` per row.

    Parameters
    ----------
    psi : array-like
        ``(psi1, psi0)``.
    theta : array-like
        Propensity coefficients.
    data : `~eqsandwich.datasets.Dataset`
    model : `~eqsandwich.nuisance_models.LogisticSpec`

    Returns
    -------
    `numpy.ndarray`
        ``(n, 2)`` array.

    Raises
    ------
    Positivity
        If a propensity is outside the positivity floor.
    """
    p = _check_positivity(logistic_probability(model, theta, data))
    return _ipw_rows(psi, p, data)


def _iptw_d_theta(psi, theta, data, model):
    x = model.design(data)
    p = _check_positivity(logistic_probability(model, theta, data))
    a, y = data['a'], data['y']
    treated = -a * (1 - p) / p * (y - psi[0])
    control = (1 - a) * p / (1 - p) * (y - psi[1])
    return np.vstack([treated @ x, control @ x]) / len(data)


def aipw_u1(psi, theta, xi, data, model, outcome):
    """
    Augmented IPW estimating function per row.

    The psi1 component is ``A Y / p - (A - p) / p m1(L) - psi1`` and the psi0
    component ``(1-A) Y / (1-p) + (A - p) / (1-p) m0(L) - psi0``. Unbiased when
    either the propensity or the outcome model is correct. With ``m = 0`` it is
    the Horvitz-Thompson form ``A Y / p - psi1``.

    Raises
    ------
    Positivity
    """
    p = _check_positivity(logistic_probability(model, theta, data))
    m1, m0 = outcome_predictions(outcome, xi, data)
    a, y = data['a'], data['y']
    return np.column_stack([a * y / p - (a - p) / p * m1 - psi[0],
                            (1 - a) * y / (1 - p) + (a - p) / (1 - p) * m0 - psi[1]])


def _aipw_d_theta(theta, xi, data, model, outcome):
    x = model.design(data)
    p = _check_positivity(logistic_probability(model, theta, data))
    m1, m0 = outcome_predictions(outcome, xi, data)
    a, y = data['a'], data['y']
    treated = -a * (y - m1) * (1 - p) / p
    control = (1 - a) * (y - m0) * p / (1 - p)
    return np.vstack([treated @ x, control @ x]) / len(data)


def _aipw_d_xi(theta, data, model, outcome):
    x = outcome.design(data)
    p = logistic_probability(model, theta, data)
    a = data['a']
    d = outcome.arm_dim
    jac = np.zeros((2, 2 * d))
    jac[0, :d] = (1 - a / p) @ x / len(data)
    jac[1, d:] = (1 - (1 - a) / (1 - p)) @ x / len(data)
    return jac


def scaled_propensity(alpha, theta, data, column='l1'):
    """
    Propensity ``expit(alpha0 + alpha1 L / theta)`` with known ``alpha`` and scale theta.
    """
    scale = np.asarray(theta, dtype=float)[0]
    with np.errstate(divide='ignore', invalid='ignore'):
        p = expit(alpha[0] + alpha[1] * data[column] / scale)
    return p


@dataclass(frozen=True)
class SnmmSpec:
    """
    Coarse structural nested mean model.

    The effect of starting treatment at time ``m`` on ``Y_k`` (``k > m``) is
    ``gamma = (k - m) b(m)^T psi`` with ``b(m) = 1`` for the ``duration`` basis
    and ``b(m) = (1, m, m^2)`` truncated to ``dim_psi`` for
    ``duration_quadratic_in_m``.

    Parameters
    ----------
    gamma_basis : {'duration', 'duration_quadratic_in_m'}
    dim_psi : int
    q_functions : sequence of callables, optional
        One per psi component, ``q(m, k, l_history)`` returning an ``(n,)``
        array, where ``l_history`` is the ``(n, m+1, n_covariates)`` covariate
        history. Defaults to ``m**j (k - m)``.
    horizon : int, optional
        Expected last decision time K, checked against the data.
    """
    gamma_basis: str = 'duration_quadratic_in_m'
    dim_psi: int = 3
    q_functions: Optional[Sequence[Callable]] = None
    horizon: Optional[int] = None

    def __post_init__(self):
        if self.gamma_basis not in ('duration', 'duration_quadratic_in_m'):
            raise ValueError(f'Unknown gamma basis {self.gamma_basis}.')
        if self.gamma_basis == 'duration' and self.dim_psi != 1:
            raise ValueError('The duration basis has exactly one parameter.')
        if not 1 <= self.dim_psi <= 3:
            raise ValueError('dim_psi must be 1, 2 or 3.')
        if self.q_functions is not None and len(self.q_functions) != self.dim_psi:
            raise ValueError('One q function is needed per psi component.')

    def basis(self, start):
        """
        ``(n, dim_psi)`` basis ``b(m)`` at treatment start times ``start``.
        """
        start = np.asarray(start, dtype=float)
        return np.stack([start ** j for j in range(self.dim_psi)], axis=-1)

    def q_values(self, m, k, data):
        """
        ``(n, dim_psi)`` values of the q functions at decision time m and outcome time k.
        """
        if self.q_functions is None:
            return np.tile([m ** j * (k - m) for j in range(self.dim_psi)], (len(data), 1))
        history = data.l[:, :m + 1, :]
        return np.column_stack([np.broadcast_to(np.asarray(q(m, k, history), dtype=float),
                                                (len(data),))
                                for q in self.q_functions])


def snmm_h(spec, psi, person, k):
    """
    Blipped-down outcome ``H(k) = Y_k - gamma`` for ``k`` after treatment start, else ``Y_k``.

    Parameters
    ----------
    spec : `SnmmSpec`
    psi : array-like
    person : `~eqsandwich.datasets.PersonHistory`
    k : int
        Outcome time, at most K+1.
    """
    if k > person.horizon + 1:
        raise ValueError(f'k = {k} is beyond the last outcome time {person.horizon + 1}.')
    start = person.t_start
    if k > start:
        return float(person.y[k] - (k - start) * spec.basis([start])[0] @ np.asarray(psi))
    return float(person.y[k])


def snmm_h_matrix(spec, psi, data):
    """
    ``H(k)`` for every person and outcome time, an ``(n, K+2)`` array.
    """
    start = data.first_treatment
    duration = np.clip(np.arange(data.horizon + 2) - start[:, np.newaxis], 0, None)
    return data.y - duration * (spec.basis(start) @ np.asarray(psi))[:, np.newaxis]


def _snmm_terms(spec, theta, data, model):
    p = pooled_logistic_probability(model, theta, data)
    at_risk = data.at_risk
    _check_positivity(p[at_risk], 'treatment probability')
    return p, at_risk, np.where(at_risk, data.a - p, 0.0)


def _pairs(horizon):
    return [(m, k) for m in range(horizon + 1) for k in range(m + 1, horizon + 2)]


def snmm_u1(spec, psi, theta, data, model):
    """
    G-estimating function per person.

    ``sum_m sum_{k>m} q(m, k) H(k) 1{not treated before m} (A_m - p_m)``.

    Parameters
    ----------
    spec : `SnmmSpec`
    psi : array-like
    theta : array-like
        Pooled logistic coefficients.
    data : `~eqsandwich.datasets.LongitudinalDataset`
    model : `~eqsandwich.nuisance_models.PooledLogisticSpec`

    Returns
    -------
    `numpy.ndarray`
        ``(n, dim_psi)`` array, affine in psi.

    Raises
    ------
    Positivity
    """
    _, _, resid = _snmm_terms(spec, theta, data, model)
    h = snmm_h_matrix(spec, psi, data)
    u = np.zeros((len(data), spec.dim_psi))
    for m, k in _pairs(data.horizon):
        u += spec.q_values(m, k, data) * (h[:, k] * resid[:, m])[:, np.newaxis]
    return u


def _snmm_d_psi(spec, theta, data, model):
    _, _, resid = _snmm_terms(spec, theta, data, model)
    start = data.first_treatment
    basis = spec.basis(start)
    jac = np.zeros((spec.dim_psi, spec.dim_psi))
    for m, k in _pairs(data.horizon):
        d_h = -np.clip(k - start, 0, None)[:, np.newaxis] * basis
        jac += (spec.q_values(m, k, data) * resid[:, m][:, np.newaxis]).T @ d_h
    return jac / len(data)


def _snmm_d_theta(spec, psi, theta, data, model):
    p, at_risk, _ = _snmm_terms(spec, theta, data, model)
    x, _ = pooled_design(model, data)
    d_resid = -np.where(at_risk, p * (1 - p), 0.0)
    h = snmm_h_matrix(spec, psi, data)
    jac = np.zeros((spec.dim_psi, model.dim))
    for m, k in _pairs(data.horizon):
        jac += (spec.q_values(m, k, data) * (h[:, k] * d_resid[:, m])[:, np.newaxis]).T @ x[:, m, :]
    return jac / len(data)


def ate(params, covariance):
    """
    Average treatment effect ``psi1 - psi0`` and its variance from the joint covariance.
    """
    return (float(params.psi @ np.asarray(ATE_CONTRAST)),
            contrast_variance(covariance, ATE_CONTRAST))


@dataclass(frozen=True, eq=False)
class FitResult:
    """
    Output of an estimator pipeline: parameters, moments and variance report.
    """
    estimator: str
    parameter_names: tuple
    params: ParamVector
    moments: object
    report: object
    contrast: Optional[tuple] = None

    def to_dict(self, level=0.95):
        intervals = {}
        for name in ('naive', 'corrected_score', 'general'):
            covariance = getattr(self.report, name)
            if covariance is None:
                continue
            lower, upper = wald_intervals(self.params.psi, covariance, level)
            intervals[name] = {'lower': lower.tolist(), 'upper': upper.tolist()}
        out = {'estimator': self.estimator, 'parameter_names': list(self.parameter_names),
               'psi': self.params.psi.tolist(), 'theta': self.params.theta.tolist(),
               'level': level, 'intervals': intervals, 'variance': self.report.to_dict()}
        if self.contrast is not None:
            effect = {}
            for name in ('naive', 'corrected_score', 'general'):
                covariance = getattr(self.report, name)
                if covariance is not None:
                    effect[name] = contrast_variance(covariance, self.contrast)
            out['ate'] = {'estimate': float(self.params.psi @ np.asarray(self.contrast)),
                          'variance': effect}
        return out


class Estimator:
    """
    Two-stage estimator: nuisance fit, then psi solve, then variance report.

    Subclasses implement `function_set` and may override `initial_params` to
    start the solver at a fitted nuisance.

    Parameters
    ----------
    known_theta : array-like, optional
        Plug in this nuisance value instead of estimating it.
    solver : `~eqsandwich.eecore.SolverConfig`, optional
    """
    name = 'custom'
    contrast = None

    def __init__(self, known_theta=None, solver=None):
        self.known_theta = None if known_theta is None else np.asarray(known_theta, dtype=float)
        self.solver = solver or SolverConfig()

    def __repr__(self):
        return f'{type(self).__name__}(name={self.name!r})'

    def _function_set(self, data):
        raise NotImplementedError

    def function_set(self, data):
        """
        The estimating functions for ``data``, with theta frozen if it is known.
        """
        fns = self._function_set(data)
        if self.known_theta is not None:
            return fix_theta(fns, self.known_theta)
        return fns

    def parameter_names(self, fns):
        return tuple(f'psi{j + 1}' for j in range(fns.dim_psi))

    def initial_params(self, data, fns):
        return None

    def estimate(self, data, init=None):
        """
        Solve for ``(psi, theta)``.

        Parameters
        ----------
        init : `~eqsandwich.eecore.ParamVector`, optional
            Warm start, such as a full-data estimate when refitting a bootstrap sample.
        """
        fns = self.function_set(data)
        return self._solve(fns, data, init)

    def _solve(self, fns, data, init):
        if init is not None and init.q != fns.dim_theta:
            init = ParamVector(init.psi, np.zeros(fns.dim_theta))
        if init is None:
            init = self.initial_params(data, fns)
        return solve_profile(fns, data, init, self.solver)

    def fit(self, data, init=None):
        """
        Estimate and compute the variance report.

        Returns
        -------
        `FitResult`
        """
        fns = self.function_set(data)
        params = self._solve(fns, data, init)
        moments = empirical_moments(fns, data, params, self.solver.fd_step_rel)
        log.debug(f'{fns.name}: psi = {params.psi}, theta = {params.theta}')
        return FitResult(self.name, self.parameter_names(fns), params, moments,
                         variance_report(moments), self.contrast)


class FunctionSetEstimator(Estimator):
    """
    Pipeline around a user supplied `~eqsandwich.eecore.EstimatingFunctionSet`.
    """
    def __init__(self, fns, known_theta=None, solver=None):
        super().__init__(known_theta, solver)
        self.fns = fns
        self.name = fns.name

    def _function_set(self, data):
        return self.fns


class IPTWEstimator(Estimator):
    """
    IPTW means of the potential outcomes with a logistic propensity model.

    Examples
    --------
    >>> from eqsandwich.datasets import Dataset
    >>> from eqsandwich.estimators import IPTWEstimator
    >>> from eqsandwich.nuisance_models import LogisticSpec
    >>> data = Dataset({'y': [2., 4., 0., 0.], 'a': [1, 1, 0, 0]})
    >>> IPTWEstimator(LogisticSpec()).estimate(data).psi
    array([3., 0.])
    """
    name = 'iptw'
    contrast = ATE_CONTRAST

    def __init__(self, propensity=None, known_theta=None, solver=None):
        super().__init__(known_theta, solver)
        self.propensity = propensity or LogisticSpec()

    def parameter_names(self, fns):
        return ('psi1', 'psi0')

    def _function_set(self, data):
        model = self.propensity
        return EstimatingFunctionSet(
            dim_psi=2, dim_theta=model.dim,
            u1=lambda d, psi, theta: iptw_u1(psi, theta, d, model),
            u2=lambda d, theta: logistic_score(model, theta, d),
            d_u1_dpsi=lambda d, psi, theta: _ipw_d_psi(
                _check_positivity(logistic_probability(model, theta, d)), d),
            d_u1_dtheta=lambda d, psi, theta: _iptw_d_theta(psi, theta, d, model),
            d_u2_dtheta=lambda d, theta: logistic_score_jacobian(model, theta, d),
            theta_is_partial_score=True, theta_monitor=check_separation, name=self.name)

    def initial_params(self, data, fns):
        if fns.dim_theta == 0:
            return None
        return ParamVector(np.zeros(2), fit_logistic(self.propensity, data, self.solver).theta)


class AIPWEstimator(Estimator):
    """
    Doubly robust AIPW means with per-arm linear outcome models.

    Parameters
    ----------
    propensity : `~eqsandwich.nuisance_models.LogisticSpec`
    outcome : `~eqsandwich.nuisance_models.LinearOutcomeSpec`
    known_theta : array-like, optional
        Known propensity coefficients.
    known_xi : array-like, optional
        Known outcome coefficients ``(xi_1, xi_0)``; otherwise fitted by least squares.
    stack_outcome_model : bool
        Treat the outcome coefficients as part of the nuisance, so their
        estimation enters the general sandwich. The stacked nuisance is not a
        score, so only the general formula applies.
    """
    name = 'aipw'
    contrast = ATE_CONTRAST

    def __init__(self, propensity=None, outcome=None, known_theta=None, known_xi=None,
                 stack_outcome_model=False, solver=None):
        super().__init__(known_theta, solver)
        if stack_outcome_model and (known_theta is not None or known_xi is not None):
            raise ValueError('stack_outcome_model estimates both nuisances; '
                             'known_theta and known_xi are not allowed with it.')
        self.propensity = propensity or LogisticSpec()
        self.outcome = outcome or LinearOutcomeSpec()
        self.known_xi = None if known_xi is None else np.asarray(known_xi, dtype=float)
        self.stack_outcome_model = stack_outcome_model

    def parameter_names(self, fns):
        return ('psi1', 'psi0')

    def _function_set(self, data):
        model, outcome = self.propensity, self.outcome
        if self.stack_outcome_model:
            return self._stacked_function_set(model, outcome)
        xi = self.known_xi if self.known_xi is not None else fit_outcome_model(outcome, data)
        return EstimatingFunctionSet(
            dim_psi=2, dim_theta=model.dim,
            u1=lambda d, psi, theta: aipw_u1(psi, theta, xi, d, model, outcome),
            u2=lambda d, theta: logistic_score(model, theta, d),
            d_u1_dpsi=lambda d, psi, theta: -np.eye(2),
            d_u1_dtheta=lambda d, psi, theta: _aipw_d_theta(theta, xi, d, model, outcome),
            d_u2_dtheta=lambda d, theta: logistic_score_jacobian(model, theta, d),
            theta_is_partial_score=True, theta_monitor=check_separation, name=self.name)

    def _stacked_function_set(self, model, outcome):
        q = model.dim

        def u2(d, nuisance):
            return np.hstack([logistic_score(model, nuisance[:q], d),
                              outcome_score(outcome, nuisance[q:], d)])

        def d_u1_dtheta(d, psi, nuisance):
            return np.hstack([_aipw_d_theta(nuisance[:q], nuisance[q:], d, model, outcome),
                              _aipw_d_xi(nuisance[:q], d, model, outcome)])

        def d_u2_dtheta(d, nuisance):
            return scipy.linalg.block_diag(logistic_score_jacobian(model, nuisance[:q], d),
                                           outcome_score_jacobian(outcome, nuisance[q:], d))

        return EstimatingFunctionSet(
            dim_psi=2, dim_theta=q + outcome.dim,
            u1=lambda d, psi, nuisance: aipw_u1(psi, nuisance[:q], nuisance[q:], d, model,
                                                outcome),
            u2=u2, d_u1_dpsi=lambda d, psi, nuisance: -np.eye(2), d_u1_dtheta=d_u1_dtheta,
            d_u2_dtheta=d_u2_dtheta, theta_is_partial_score=False,
            theta_monitor=lambda nuisance: check_separation(nuisance[:q]),
            name=f'{self.name} (stacked outcome model)')

    def initial_params(self, data, fns):
        if fns.dim_theta == 0:
            return None
        theta = fit_logistic(self.propensity, data, self.solver).theta
        if self.stack_outcome_model:
            theta = np.concatenate([theta, fit_outcome_model(self.outcome, data)])
        return ParamVector(np.zeros(2), theta)


class SNMMEstimator(Estimator):
    """
    Coarse SNMM g-estimation with a pooled logistic model for treatment initiation.

    Parameters
    ----------
    snmm : `SnmmSpec`
    treatment : `~eqsandwich.nuisance_models.PooledLogisticSpec`
    """
    name = 'snmm'

    def __init__(self, snmm=None, treatment=None, known_theta=None, solver=None):
        super().__init__(known_theta, solver)
        self.snmm = snmm or SnmmSpec()
        self.treatment = treatment or PooledLogisticSpec()

    def _function_set(self, data):
        spec, model = self.snmm, self.treatment
        if not data.is_absorbing:
            raise ValueError('SNMM estimation requires absorbing treatment '
                             '(once treated, always treated).')
        if spec.horizon is not None and spec.horizon != data.horizon:
            raise ValueError(f'Data horizon {data.horizon} does not match the model '
                             f'horizon {spec.horizon}.')
        bound = Thresholds().get('q_bound')
        for m, k in _pairs(data.horizon):
            if np.max(np.abs(spec.q_values(m, k, data))) >= bound:
                raise ValueError(f'q function exceeds {bound:g} at m = {m}, k = {k}.')

        return EstimatingFunctionSet(
            dim_psi=spec.dim_psi, dim_theta=model.dim,
            u1=lambda d, psi, theta: snmm_u1(spec, psi, theta, d, model),
            u2=lambda d, theta: pooled_logistic_score(model, theta, d),
            d_u1_dpsi=lambda d, psi, theta: _snmm_d_psi(spec, theta, d, model),
            d_u1_dtheta=lambda d, psi, theta: _snmm_d_theta(spec, psi, theta, d, model),
            d_u2_dtheta=lambda d, theta: pooled_logistic_score_jacobian(model, theta, d),
            theta_is_partial_score=True, theta_monitor=check_separation, name=self.name)

    def initial_params(self, data, fns):
        if fns.dim_theta == 0:
            return None
        theta = fit_pooled_logistic(self.treatment, data, self.solver).theta
        return ParamVector(np.zeros(self.snmm.dim_psi), theta)


class ScaledIPTWEstimator(Estimator):
    """
    IPTW whose propensity ``expit(alpha0 + alpha1 L / theta)`` depends on a scale
    theta estimated by the method of moments.

    The nuisance equation is unbiased but not a score, so the score-corrected
    sandwich does not apply; the general sandwich does.
    """
    name = 'scaled_iptw'
    contrast = ATE_CONTRAST

    def __init__(self, alpha=(0.0, 1.0), scale=None, known_theta=None, solver=None):
        super().__init__(known_theta, solver)
        self.alpha = tuple(float(value) for value in alpha)
        self.scale = scale or MomentScaleSpec()

    def parameter_names(self, fns):
        return ('psi1', 'psi0')

    def _function_set(self, data):
        alpha, column = self.alpha, self.scale.column

        def propensity(d, theta):
            return _check_positivity(scaled_propensity(alpha, theta, d, column))

        return EstimatingFunctionSet(
            dim_psi=2, dim_theta=1,
            u1=lambda d, psi, theta: _ipw_rows(psi, propensity(d, theta), d),
            u2=lambda d, theta: moment_scale_score(self.scale, theta, d),
            d_u1_dpsi=lambda d, psi, theta: _ipw_d_psi(propensity(d, theta), d),
            d_u2_dtheta=lambda d, theta: -np.ones((1, 1)),
            theta_is_partial_score=False, name=self.name)

    def initial_params(self, data, fns):
        if fns.dim_theta == 0:
            return None
        return ParamVector(np.zeros(2), fit_moment_scale(self.scale, data))
