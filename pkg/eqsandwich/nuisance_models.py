"""
Nuisance models: logistic and pooled logistic propensity models, per-arm
linear outcome models and a method-of-moments scale model.

Logistic probabilities use the convention ``p = 1 / (1 + exp(-x @ theta))``.
Writing the model as ``1 / (1 + exp(x @ theta))`` only flips the sign of theta;
fitted probabilities and scores are the same, and tests are stated on
probabilities.
"""
import warnings
from dataclasses import dataclass, replace
from typing import NamedTuple, Optional, Tuple

import numpy as np
import scipy.linalg
from scipy import stats
from scipy.special import expit, log_expit

from eqsandwich import log
from eqsandwich import numkit
from eqsandwich.constants import Thresholds
from eqsandwich.datasets import Dataset
from eqsandwich.eecore import SolverConfig, damped_newton
from eqsandwich.exceptions import PositivityWarning, Separation, SingularMatrix

__all__ = ['LogisticSpec', 'PooledLogisticSpec', 'LinearOutcomeSpec', 'MomentScaleSpec',
           'LogisticFit', 'logistic_probability', 'logistic_log_likelihood', 'logistic_score',
           'logistic_score_jacobian', 'fit_logistic', 'pooled_design',
           'pooled_logistic_probability', 'pooled_logistic_score',
           'pooled_logistic_score_jacobian', 'fit_pooled_logistic', 'person_time_dataset',
           'fit_outcome_model', 'outcome_score', 'outcome_score_jacobian',
           'outcome_predictions', 'moment_scale_score', 'fit_moment_scale',
           'moment_scale_factor', 'check_separation']


class LogisticFit(NamedTuple):
    """
    Fitted nuisance: coefficients, Fisher information ``P_n U2 U2^T`` and ``fisher^-1 / n``.
    """
    theta: np.ndarray
    fisher: np.ndarray
    covariance: np.ndarray


def check_separation(theta):
    """
    Raise `~eqsandwich.exceptions.Separation` once logistic coefficients diverge.
    """
    bound = Thresholds().get('separation_bound')
    if np.max(np.abs(theta), initial=0.0) > bound:
        raise Separation(f'Logistic coefficients exceed {bound:g} in absolute value; '
                         'the treatment is (quasi-)separated by the covariates.')


def _warn_positivity(p, label):
    floor = Thresholds().get('positivity_floor')
    outside = np.count_nonzero((p < floor) | (p > 1 - floor))
    if outside:
        warnings.warn(f'{outside} fitted {label} probabilities outside [{floor}, {1 - floor}].',
                      PositivityWarning)


def _nuisance_cfg(cfg):
    cfg = cfg or SolverConfig()
    return replace(cfg, tol=min(cfg.tol, Thresholds().get('nuisance_tol')))


def _fisher(scores):
    n = scores.shape[0]
    fisher = numkit.symmetrize(scores.T @ scores / n)
    return fisher, numkit.sym_inverse(fisher) / n


@dataclass(frozen=True)
class LogisticSpec:
    """
    Point-treatment propensity model ``P(A=1|L) = expit(theta^T (1, L))``.

    Parameters
    ----------
    design_columns : tuple of str
        Covariate columns of the dataset.
    include_intercept : bool
    """
    design_columns: Tuple[str, ...] = ()
    include_intercept: bool = True

    def __post_init__(self):
        object.__setattr__(self, 'design_columns', tuple(self.design_columns))
        if not self.design_columns and not self.include_intercept:
            raise ValueError('A logistic model needs an intercept or at least one column.')

    @property
    def dim(self):
        return len(self.design_columns) + int(self.include_intercept)

    def design(self, data):
        for name in self.design_columns:
            if name not in data:
                raise KeyError(f'Design column {name} is not in the dataset.')
        columns = [data[name] for name in self.design_columns]
        if self.include_intercept:
            columns.insert(0, np.ones(len(data)))
        return np.column_stack(columns)


def _check_theta(theta, dim):
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (dim,):
        raise ValueError(f'theta has shape {theta.shape}, expected ({dim},).')
    return theta


def logistic_probability(spec, theta, data):
    theta = _check_theta(theta, spec.dim)
    return expit(spec.design(data) @ theta)


def logistic_log_likelihood(spec, theta, data):
    """
    Average Bernoulli log-likelihood of the treatment column.
    """
    eta = spec.design(data) @ _check_theta(theta, spec.dim)
    a = data['a']
    return np.mean(a * log_expit(eta) + (1 - a) * log_expit(-eta))


def logistic_score(spec, theta, data):
    """
    Per-row logistic score ``x (a - p)``, an ``(n, q)`` array.

    Examples
    --------
    >>> import numpy as np
    >>> from eqsandwich.datasets import Dataset
    >>> from eqsandwich.nuisance_models import LogisticSpec, logistic_score
    >>> data = Dataset({'y': [0., 0.], 'a': [0, 1]})
    >>> logistic_score(LogisticSpec(), np.zeros(1), data)[:, 0]
    array([-0.5,  0.5])
    """
    x = spec.design(data)
    p = expit(x @ _check_theta(theta, spec.dim))
    return x * (data['a'] - p)[:, np.newaxis]


def logistic_score_jacobian(spec, theta, data):
    """
    Average derivative of the score, ``-P_n p (1 - p) x x^T``.
    """
    x = spec.design(data)
    p = expit(x @ _check_theta(theta, spec.dim))
    return -(x * (p * (1 - p))[:, np.newaxis]).T @ x / x.shape[0]


def fit_logistic(spec, data, cfg=None):
    """
    Maximum likelihood fit by Newton's method on the score equations.

    Parameters
    ----------
    spec : `LogisticSpec`
    data : `~eqsandwich.datasets.Dataset`
    cfg : `~eqsandwich.eecore.SolverConfig`, optional

    Returns
    -------
    `LogisticFit`

    Raises
    ------
    Separation
        If the coefficients diverge.
    SingularMatrix
        If the design is rank deficient.
    """
    cfg = _nuisance_cfg(cfg)
    x = spec.design(data)
    if np.linalg.matrix_rank(x) < spec.dim:
        raise SingularMatrix('Logistic design matrix is rank deficient.')

    theta = damped_newton(lambda t: logistic_score(spec, t, data).mean(axis=0),
                          lambda t: logistic_score_jacobian(spec, t, data),
                          np.zeros(spec.dim), cfg, 'logistic', check_separation)
    _warn_positivity(expit(x @ theta), 'propensity')
    fisher, covariance = _fisher(logistic_score(spec, theta, data))
    log.info(f'Fitted logistic propensity model on {len(data)} rows: theta = {theta}')
    return LogisticFit(theta, fisher, covariance)


@dataclass(frozen=True)
class PooledLogisticSpec:
    """
    Pooled logistic model for ``P(A_k = 1 | L_k, A_{k-1})`` over person-time.

    Parameters
    ----------
    covariate_columns : tuple of str
        Time-varying covariates entering the model.
    lag_treatment : bool
        Include ``A_{k-1}`` (zero at ``k = 0``). Only meaningful when
        ``at_risk_only`` is false since the lag is zero on every at-risk row.
    include_intercept : bool
    at_risk_only : bool
        Restrict the likelihood to person-time with no earlier treatment.
    """
    covariate_columns: Tuple[str, ...] = ()
    lag_treatment: bool = False
    include_intercept: bool = True
    at_risk_only: bool = True

    def __post_init__(self):
        object.__setattr__(self, 'covariate_columns', tuple(self.covariate_columns))
        if self.lag_treatment and self.at_risk_only:
            raise ValueError('lag_treatment requires at_risk_only=False: the lagged treatment '
                             'is zero on every at-risk record.')
        if self.dim == 0:
            raise ValueError('A pooled logistic model needs at least one term.')

    @property
    def dim(self):
        return (len(self.covariate_columns) + int(self.lag_treatment)
                + int(self.include_intercept))

    @property
    def term_names(self):
        names = list(self.covariate_columns)
        if self.lag_treatment:
            names.append('a_lag')
        if self.include_intercept:
            names.insert(0, 'intercept')
        return tuple(names)


def pooled_design(spec, data):
    """
    Person-time design array ``(n, K+1, q)`` and the mask of contributing records.
    """
    n, width = data.a.shape
    terms = [data.covariate(name) for name in spec.covariate_columns]
    if spec.lag_treatment:
        terms.append(np.concatenate([np.zeros((n, 1)), data.a[:, :-1]], axis=1))
    if spec.include_intercept:
        terms.insert(0, np.ones((n, width)))
    x = np.stack(terms, axis=-1)
    mask = data.at_risk if spec.at_risk_only else np.ones((n, width), dtype=bool)
    return x, mask


def pooled_logistic_probability(spec, theta, data):
    """
    ``(n, K+1)`` treatment probabilities at every decision time.
    """
    x, _ = pooled_design(spec, data)
    return expit(x @ _check_theta(theta, spec.dim))


def pooled_logistic_score(spec, theta, data):
    """
    Per-person pooled score ``sum_k x_k (A_k - p_k)`` over contributing records.

    The person, not the person-time record, is the independent unit.
    """
    x, mask = pooled_design(spec, data)
    p = expit(x @ _check_theta(theta, spec.dim))
    resid = np.where(mask, data.a - p, 0.0)
    return np.einsum('nkq,nk->nq', x, resid)


def pooled_logistic_score_jacobian(spec, theta, data):
    x, mask = pooled_design(spec, data)
    p = expit(x @ _check_theta(theta, spec.dim))
    weight = np.where(mask, p * (1 - p), 0.0)
    return -np.einsum('nkq,nk,nkr->qr', x, weight, x) / x.shape[0]


def fit_pooled_logistic(spec, data, cfg=None):
    """
    Fit the pooled logistic model; Fisher information is per person.

    Returns
    -------
    `LogisticFit`
    """
    cfg = _nuisance_cfg(cfg)
    x, mask = pooled_design(spec, data)
    if np.linalg.matrix_rank(x[mask]) < spec.dim:
        raise SingularMatrix('Pooled logistic design matrix is rank deficient.')

    theta = damped_newton(lambda t: pooled_logistic_score(spec, t, data).mean(axis=0),
                          lambda t: pooled_logistic_score_jacobian(spec, t, data),
                          np.zeros(spec.dim), cfg, 'pooled logistic', check_separation)
    _warn_positivity(expit(x[mask] @ theta), 'treatment')
    fisher, covariance = _fisher(pooled_logistic_score(spec, theta, data))
    log.info(f'Fitted pooled logistic model on {len(data)} persons, '
             f'{np.count_nonzero(mask)} records: theta = {theta}')
    return LogisticFit(theta, fisher, covariance)


def person_time_dataset(spec, data):
    """
    Contributing person-time records as a point `~eqsandwich.datasets.Dataset`.

    Columns are the model's covariates, ``a_lag`` when lagged treatment is
    modelled, the treatment ``a`` and the zero placeholder outcome ``y``. A
    `LogisticSpec` over the same terms fitted to this dataset solves the same
    score equations as the pooled model.
    """
    x, mask = pooled_design(spec, data)
    offset = int(spec.include_intercept)
    names = spec.term_names[offset:]
    columns = {name: x[..., offset + j][mask] for j, name in enumerate(names)}
    columns['a'] = data.a[mask]
    columns['y'] = np.zeros(np.count_nonzero(mask))
    return Dataset(columns)


@dataclass(frozen=True)
class LinearOutcomeSpec:
    """
    Per-arm linear outcome models ``m_a(L) = (1, L) xi_a`` for a = 1, 0.

    The stacked coefficient vector is ``xi = (xi_1, xi_0)``.
    """
    design_columns: Tuple[str, ...] = ()
    include_intercept: bool = True

    def __post_init__(self):
        object.__setattr__(self, 'design_columns', tuple(self.design_columns))

    @property
    def arm_dim(self):
        return len(self.design_columns) + int(self.include_intercept)

    @property
    def dim(self):
        return 2 * self.arm_dim

    def design(self, data):
        return LogisticSpec(self.design_columns, self.include_intercept).design(data)


def outcome_predictions(spec, xi, data):
    """
    Predicted outcomes ``(m1, m0)`` under treatment and under control.
    """
    xi = _check_theta(xi, spec.dim)
    x = spec.design(data)
    return x @ xi[:spec.arm_dim], x @ xi[spec.arm_dim:]


def outcome_score(spec, xi, data):
    """
    Least-squares score ``1{A=a} x (Y - x xi_a)`` for both arms, ``(n, 2 d)``.
    """
    x = spec.design(data)
    m1, m0 = outcome_predictions(spec, xi, data)
    a, y = data['a'], data['y']
    treated = x * (a * (y - m1))[:, np.newaxis]
    control = x * ((1 - a) * (y - m0))[:, np.newaxis]
    return np.hstack([treated, control])


def outcome_score_jacobian(spec, xi, data):
    x = spec.design(data)
    a = data['a']
    n, d = x.shape
    jac = np.zeros((2 * d, 2 * d))
    jac[:d, :d] = -(x * a[:, np.newaxis]).T @ x / n
    jac[d:, d:] = -(x * (1 - a)[:, np.newaxis]).T @ x / n
    return jac


def fit_outcome_model(spec, data):
    """
    Least-squares fit of each arm's outcome model.

    Raises
    ------
    SingularMatrix
        If an arm's design is rank deficient.
    """
    x = spec.design(data)
    a, y = data['a'], data['y']
    coefficients = []
    for arm in (1, 0):
        rows = a == arm
        if np.count_nonzero(rows) < spec.arm_dim or \
                np.linalg.matrix_rank(x[rows]) < spec.arm_dim:
            raise SingularMatrix(f'Outcome design for arm {arm} is rank deficient.')
        coef, *_ = scipy.linalg.lstsq(x[rows], y[rows])
        coefficients.append(coef)
    return np.concatenate(coefficients)


@dataclass(frozen=True)
class MomentScaleSpec:
    """
    Method-of-moments scale of a centred normal covariate, ``sigma = E|L| / E|Z|``.

    Its estimating function is unbiased but not a score.

    Parameters
    ----------
    column : str
    truncation : float, optional
        The covariate is ``sigma Z`` with Z standard normal truncated to
        ``[-truncation, truncation]``; untruncated when None.
    """
    column: str = 'l1'
    truncation: Optional[float] = None

    @property
    def dim(self):
        return 1

    @property
    def factor(self):
        return moment_scale_factor(self.truncation)


def moment_scale_factor(truncation=None):
    """
    ``1 / E|Z|`` for Z standard normal, optionally truncated to ``[-truncation, truncation]``.

    Examples
    --------
    >>> import numpy as np
    >>> from eqsandwich.nuisance_models import moment_scale_factor
    >>> bool(np.isclose(moment_scale_factor(), np.sqrt(np.pi / 2)))
    True
    """
    if truncation is None:
        return np.sqrt(np.pi / 2)
    mean_abs = (2 * (stats.norm.pdf(0) - stats.norm.pdf(truncation))
                / (2 * stats.norm.cdf(truncation) - 1))
    return 1 / mean_abs


def moment_scale_score(spec, theta, data):
    theta = _check_theta(theta, 1)
    return (spec.factor * np.abs(data[spec.column]) - theta[0])[:, np.newaxis]


def fit_moment_scale(spec, data):
    return np.array([spec.factor * np.mean(np.abs(data[spec.column]))])
