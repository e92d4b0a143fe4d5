"""
Estimating-function abstraction, stacked and profile solvers, and empirical moments.

A two-stage estimator solves

.. math::

    P_n U_2(\\theta) = 0, \\qquad P_n U_1(\\psi, \\hat\\theta) = 0,

which has the same root as the stacked system :math:`P_n (U_1; U_2) = 0`.
Estimating functions are vectorised: ``u1(data, psi, theta)`` returns one row
per independent unit (a subject, or a person for longitudinal data).
"""
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from eqsandwich import log
from eqsandwich import numkit
from eqsandwich.constants import Thresholds
from eqsandwich.exceptions import (NoConvergence, NonFiniteEvaluation, Positivity,
                                   SingularJacobian, SingularMatrix)

__all__ = ['ParamVector', 'SolverConfig', 'EstimatingFunctionSet', 'MomentEstimates',
           'solve_stacked', 'solve_profile', 'empirical_moments', 'fix_theta',
           'damped_newton']


def _threshold(name):
    return field(default_factory=lambda: Thresholds().get(name))


@dataclass(frozen=True, eq=False)
class ParamVector:
    """
    Parameter of interest ``psi`` (length p >= 1) and nuisance ``theta`` (length q >= 0).
    """
    psi: np.ndarray
    theta: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        psi = numkit.as_vector(self.psi)
        theta = numkit.as_vector(self.theta)
        if psi.size < 1:
            raise ValueError('psi must have at least one entry.')
        object.__setattr__(self, 'psi', psi)
        object.__setattr__(self, 'theta', theta)

    @property
    def p(self):
        return self.psi.size

    @property
    def q(self):
        return self.theta.size

    def stacked(self):
        return np.concatenate([self.psi, self.theta])

    @classmethod
    def from_stacked(cls, x, p):
        x = np.asarray(x, dtype=float)
        return cls(x[:p], x[p:])

    def to_dict(self):
        return {'psi': self.psi.tolist(), 'theta': self.theta.tolist()}


@dataclass(frozen=True)
class SolverConfig:
    """
    Damped Newton settings.

    Parameters
    ----------
    tol : float
        Convergence bound on the sup-norm of the averaged estimating equations.
    max_iter : int
        Newton iteration cap.
    max_halvings : int
        Step-halving cap per iteration.
    fd_step_rel : float
        Relative step for finite-difference Jacobians.
    step_rel : float
        A full Newton step no longer than ``step_rel * (1 + |x|)`` means the
        residual is at its rounding floor and ``x`` is returned as the root.
    """
    tol: float = _threshold('solver_tol')
    max_iter: int = _threshold('solver_max_iter')
    max_halvings: int = _threshold('solver_max_halvings')
    fd_step_rel: float = _threshold('fd_step_rel')
    step_rel: float = _threshold('solver_step_rel')

    def __post_init__(self):
        if self.tol <= 0 or self.fd_step_rel <= 0 or self.step_rel < 0:
            raise ValueError('tol and fd_step_rel must be positive, step_rel non-negative.')
        if self.max_iter < 1 or self.max_halvings < 0:
            raise ValueError('max_iter must be >= 1 and max_halvings >= 0.')


def _rows(values, n, dim, label):
    values = np.asarray(values, dtype=float)
    if values.ndim == 1 and dim == 1:
        values = values[:, np.newaxis]
    if values.shape != (n, dim):
        raise ValueError(f'{label} returned shape {values.shape}, expected {(n, dim)}.')
    if not np.all(np.isfinite(values)):
        raise NonFiniteEvaluation(f'{label} returned non-finite values.')
    return values


@dataclass(frozen=True)
class EstimatingFunctionSet:
    """
    Per-unit estimating functions for psi and theta.

    Parameters
    ----------
    dim_psi, dim_theta : int
        Dimensions p and q.
    u1 : callable
        ``u1(data, psi, theta)`` returning an ``(n, p)`` array.
    u2 : callable, optional
        ``u2(data, theta)`` returning an ``(n, q)`` array; required when q > 0.
    d_u1_dpsi, d_u1_dtheta : callable, optional
        ``f(data, psi, theta)`` returning the averaged Jacobians ``(p, p)`` and ``(p, q)``.
    d_u2_dtheta : callable, optional
        ``f(data, theta)`` returning the averaged Jacobian ``(q, q)``.
    theta_is_partial_score : bool
        Whether ``u2`` is a (partial) score for theta.
    theta_monitor : callable, optional
        Called with every theta the nuisance solver visits; raises to abort,
        for example on logistic separation.
    name : str
        Label used in logs and reports.
    """
    dim_psi: int
    dim_theta: int
    u1: Callable
    u2: Optional[Callable] = None
    d_u1_dpsi: Optional[Callable] = None
    d_u1_dtheta: Optional[Callable] = None
    d_u2_dtheta: Optional[Callable] = None
    theta_is_partial_score: bool = True
    theta_monitor: Optional[Callable] = None
    name: str = 'custom'

    def __post_init__(self):
        if self.dim_psi < 1 or self.dim_theta < 0:
            raise ValueError('dim_psi must be >= 1 and dim_theta >= 0.')
        if self.dim_theta > 0 and self.u2 is None:
            raise ValueError('u2 is required when dim_theta > 0.')

    def u1_rows(self, data, psi, theta):
        return _rows(self.u1(data, psi, theta), len(data), self.dim_psi, f'{self.name} u1')

    def u2_rows(self, data, theta):
        if self.dim_theta == 0:
            return np.zeros((len(data), 0))
        return _rows(self.u2(data, theta), len(data), self.dim_theta, f'{self.name} u2')

    def mean_u1(self, data, psi, theta):
        return self.u1_rows(data, psi, theta).mean(axis=0)

    def mean_u2(self, data, theta):
        return self.u2_rows(data, theta).mean(axis=0)

    def _step(self, x, fd_step_rel):
        return fd_step_rel * max(1.0, np.max(np.abs(x), initial=0.0))

    def jacobian_u1_psi(self, data, psi, theta, fd_step_rel):
        if self.d_u1_dpsi is not None:
            return numkit.as_matrix(self.d_u1_dpsi(data, psi, theta))
        return numkit.finite_diff_jacobian(lambda s: self.mean_u1(data, s, theta), psi,
                                           self._step(psi, fd_step_rel))

    def jacobian_u1_theta(self, data, psi, theta, fd_step_rel):
        if self.dim_theta == 0:
            return np.zeros((self.dim_psi, 0))
        if self.d_u1_dtheta is not None:
            return numkit.as_matrix(self.d_u1_dtheta(data, psi, theta))
        return numkit.finite_diff_jacobian(lambda t: self.mean_u1(data, psi, t), theta,
                                           self._step(theta, fd_step_rel))

    def jacobian_u2_theta(self, data, theta, fd_step_rel):
        if self.dim_theta == 0:
            return np.zeros((0, 0))
        if self.d_u2_dtheta is not None:
            return numkit.as_matrix(self.d_u2_dtheta(data, theta))
        return numkit.finite_diff_jacobian(lambda t: self.mean_u2(data, t), theta,
                                           self._step(theta, fd_step_rel))


def fix_theta(fns, theta):
    """
    Freeze the nuisance at a known value, giving a set with ``dim_theta = 0``.

    Used for the theta-known comparison runs.
    """
    theta = numkit.as_vector(theta)
    if theta.size != fns.dim_theta:
        raise ValueError(f'Known theta has length {theta.size}, expected {fns.dim_theta}.')
    d_psi = None
    if fns.d_u1_dpsi is not None:
        def d_psi(data, psi, _):
            return fns.d_u1_dpsi(data, psi, theta)

    return EstimatingFunctionSet(
        dim_psi=fns.dim_psi, dim_theta=0,
        u1=lambda data, psi, _: fns.u1(data, psi, theta),
        d_u1_dpsi=d_psi, theta_is_partial_score=fns.theta_is_partial_score,
        name=f'{fns.name} (known theta)')


@dataclass(frozen=True, eq=False)
class MomentEstimates:
    """
    Empirical moment matrices at the fitted parameters.

    Attributes
    ----------
    bread : (p, p) average of dU1/dpsi
    d_theta_u1 : (p, q) average of dU1/dtheta
    meat : (p, p) average of U1 U1^T
    cross : (p, q) average of U1 U2^T
    fisher : (q, q) average of U2 U2^T
    d_theta_u2 : (q, q) average of dU2/dtheta
    n : number of independent units
    u1_rows, u2_rows : per-unit U1 and U2 values, when available
    theta_is_partial_score : whether U2 is a partial score
    """
    bread: np.ndarray
    d_theta_u1: np.ndarray
    meat: np.ndarray
    cross: np.ndarray
    fisher: np.ndarray
    d_theta_u2: np.ndarray
    n: int
    u1_rows: Optional[np.ndarray] = None
    u2_rows: Optional[np.ndarray] = None
    theta_is_partial_score: bool = True

    def __post_init__(self):
        for name in ('bread', 'd_theta_u1', 'meat', 'cross', 'fisher', 'd_theta_u2'):
            object.__setattr__(self, name, numkit.as_matrix(getattr(self, name)))
        p, q = self.cross.shape
        expected = {'bread': (p, p), 'd_theta_u1': (p, q), 'meat': (p, p),
                    'fisher': (q, q), 'd_theta_u2': (q, q)}
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ValueError(f'{name} has shape {getattr(self, name).shape}, expected {shape}.')
        if self.n < 1:
            raise ValueError('n must be positive.')
        for name in ('meat', 'fisher'):
            matrix = getattr(self, name)
            scale = max(1.0, np.max(np.abs(matrix), initial=0.0))
            if numkit.min_eigenvalue(matrix) < -Thresholds().get('symmetry_tol') * scale:
                raise ValueError(f'{name} is not positive semi-definite.')

    @property
    def p(self):
        return self.bread.shape[0]

    @property
    def q(self):
        return self.fisher.shape[0]


def damped_newton(residual, jacobian, x0, cfg, label, monitor=None):
    """
    Damped Newton iteration on ``residual(x) = 0`` with step halving on the 2-norm.
    """
    x = np.array(x0, dtype=float)
    if monitor is not None:
        monitor(x)
    g = residual(x)
    for iteration in range(cfg.max_iter):
        gmax = np.max(np.abs(g), initial=0.0)
        log.debug(f'{label}: iteration {iteration}, max residual {gmax:.3e}')
        if gmax <= cfg.tol:
            return x
        try:
            step = numkit.solve_linear(jacobian(x), -g)
        except SingularMatrix as err:
            raise SingularJacobian(f'{label}: {err}') from err
        if np.linalg.norm(step) <= cfg.step_rel * (1 + np.linalg.norm(x)):
            log.debug(f'{label}: Newton step below rounding floor, residual {gmax:.3e}')
            return x

        norm0 = np.linalg.norm(g)
        scale = 1.0
        for halving in range(cfg.max_halvings + 1):
            trial = x + scale * step
            try:
                g_trial = residual(trial)
            except (NonFiniteEvaluation, Positivity):
                g_trial = None
            if g_trial is not None and np.linalg.norm(g_trial) < norm0:
                break
            scale /= 2
        else:
            raise NoConvergence(f'{label}: no decrease after {cfg.max_halvings} step halvings.')
        if halving:
            log.debug(f'{label}: step halved {halving} times')
        x, g = trial, g_trial
        if monitor is not None:
            monitor(x)

    if np.max(np.abs(g), initial=0.0) <= cfg.tol:
        return x
    raise NoConvergence(f'{label}: no convergence in {cfg.max_iter} iterations.')


def _check_size(fns, data):
    if len(data) < fns.dim_psi + fns.dim_theta:
        raise ValueError(f'Need at least {fns.dim_psi + fns.dim_theta} units, got {len(data)}.')


def _solve_theta(fns, data, theta0, cfg):
    if fns.dim_theta == 0:
        return np.zeros(0)
    return damped_newton(lambda t: fns.mean_u2(data, t),
                         lambda t: fns.jacobian_u2_theta(data, t, cfg.fd_step_rel),
                         theta0, cfg, f'{fns.name} nuisance', fns.theta_monitor)


def _default_init(fns, init):
    if init is None:
        return ParamVector(np.zeros(fns.dim_psi), np.zeros(fns.dim_theta))
    if init.p != fns.dim_psi or init.q != fns.dim_theta:
        raise ValueError(f'Initial values have dimensions ({init.p}, {init.q}), '
                         f'expected ({fns.dim_psi}, {fns.dim_theta}).')
    return init


def solve_profile(fns, data, init=None, cfg=None):
    """
    Two-step solve: theta from ``P_n U2 = 0``, then psi from ``P_n U1(psi, theta_hat) = 0``.

    Parameters
    ----------
    fns : `EstimatingFunctionSet`
    data : `~eqsandwich.datasets.Dataset` or `~eqsandwich.datasets.LongitudinalDataset`
    init : `ParamVector`, optional
        Starting values, zeros by default.
    cfg : `SolverConfig`, optional

    Returns
    -------
    `ParamVector`

    Raises
    ------
    NoConvergence, SingularJacobian
    """
    cfg = cfg or SolverConfig()
    _check_size(fns, data)
    init = _default_init(fns, init)

    theta = _solve_theta(fns, data, init.theta, cfg)
    psi = damped_newton(lambda s: fns.mean_u1(data, s, theta),
                        lambda s: fns.jacobian_u1_psi(data, s, theta, cfg.fd_step_rel),
                        init.psi, cfg, f'{fns.name} psi')
    return ParamVector(psi, theta)


def solve_stacked(fns, data, init=None, cfg=None):
    """
    Joint solve of the stacked system ``P_n (U1; U2) = 0``.

    Without ``init`` theta starts from a nuisance-only solve and psi from zero.
    The stacked Jacobian is block upper triangular since U2 does not involve psi.
    """
    cfg = cfg or SolverConfig()
    _check_size(fns, data)
    if init is None:
        start = _default_init(fns, None)
        init = ParamVector(start.psi, _solve_theta(fns, data, start.theta, cfg))
    init = _default_init(fns, init)
    p, q = fns.dim_psi, fns.dim_theta

    def residual(x):
        psi, theta = x[:p], x[p:]
        return np.concatenate([fns.mean_u1(data, psi, theta), fns.mean_u2(data, theta)])

    def jacobian(x):
        psi, theta = x[:p], x[p:]
        jac = np.zeros((p + q, p + q))
        jac[:p, :p] = fns.jacobian_u1_psi(data, psi, theta, cfg.fd_step_rel)
        jac[:p, p:] = fns.jacobian_u1_theta(data, psi, theta, cfg.fd_step_rel)
        jac[p:, p:] = fns.jacobian_u2_theta(data, theta, cfg.fd_step_rel)
        return jac

    monitor = None
    if fns.theta_monitor is not None:
        def monitor(x):
            fns.theta_monitor(x[p:])

    x = damped_newton(residual, jacobian, init.stacked(), cfg, f'{fns.name} stacked', monitor)
    return ParamVector.from_stacked(x, p)


def empirical_moments(fns, data, at, fd_step_rel=None):
    """
    All six moment matrices at the fitted parameters ``at``.

    Jacobians are analytic when the function set supplies them, else central
    finite differences.

    Returns
    -------
    `MomentEstimates`

    Raises
    ------
    NonFiniteEvaluation
    """
    if fd_step_rel is None:
        fd_step_rel = Thresholds().get('fd_step_rel')
    u1 = fns.u1_rows(data, at.psi, at.theta)
    u2 = fns.u2_rows(data, at.theta)
    n = u1.shape[0]

    return MomentEstimates(
        bread=fns.jacobian_u1_psi(data, at.psi, at.theta, fd_step_rel),
        d_theta_u1=fns.jacobian_u1_theta(data, at.psi, at.theta, fd_step_rel),
        meat=numkit.symmetrize(u1.T @ u1 / n),
        cross=u1.T @ u2 / n,
        fisher=numkit.symmetrize(u2.T @ u2 / n),
        d_theta_u2=fns.jacobian_u2_theta(data, at.theta, fd_step_rel),
        n=n, u1_rows=u1, u2_rows=u2,
        theta_is_partial_score=fns.theta_is_partial_score)
