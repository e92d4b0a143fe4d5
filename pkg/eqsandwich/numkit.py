"""
Small dense linear algebra and numerical differentiation kernel.

Matrices and vectors are plain `numpy.ndarray` objects of dtype float64;
`as_matrix` and `as_vector` enforce the shape and finiteness invariants on
construction.
"""
import numpy as np
import scipy.linalg

from eqsandwich.constants import Thresholds
from eqsandwich.exceptions import NonFiniteEvaluation, NotSymmetric, SingularMatrix

__all__ = ['as_matrix', 'as_vector', 'symmetrize', 'solve_linear', 'sym_inverse',
           'min_eigenvalue', 'finite_diff_jacobian']


def as_matrix(values):
    """
    Convert ``values`` to a finite 2D float array.

    Raises
    ------
    ValueError
        If ``values`` is not two dimensional.
    NonFiniteEvaluation
        If any entry is NaN or Inf.
    """
    matrix = np.array(values, dtype=float)
    if matrix.ndim != 2:
        raise ValueError(f'A matrix must be 2D, got {matrix.ndim} dimensions.')
    if not np.all(np.isfinite(matrix)):
        raise NonFiniteEvaluation('Matrix has non-finite entries.')
    return matrix


def as_vector(values):
    """
    Convert ``values`` to a finite 1D float array.
    """
    vector = np.atleast_1d(np.array(values, dtype=float))
    if vector.ndim != 1:
        raise ValueError(f'A vector must be 1D, got {vector.ndim} dimensions.')
    if not np.all(np.isfinite(vector)):
        raise NonFiniteEvaluation('Vector has non-finite entries.')
    return vector


def symmetrize(m):
    return (m + m.T) / 2


def _check_symmetric(m):
    tol = Thresholds().get('symmetry_tol')
    scale = max(1.0, np.max(np.abs(m), initial=0.0))
    if np.max(np.abs(m - m.T), initial=0.0) > tol * scale:
        raise NotSymmetric(f'Matrix is not symmetric within {tol}.')


def solve_linear(a, b):
    """
    Solve ``a @ x = b`` with a pivoted LU factorisation.

    Parameters
    ----------
    a : `numpy.ndarray`
        Square matrix.
    b : `numpy.ndarray`
        Right hand side, a vector or a matrix with as many rows as ``a``.

    Returns
    -------
    `numpy.ndarray`
        Solution with the shape of ``b``.

    Raises
    ------
    SingularMatrix
        If the condition number of ``a`` exceeds the configured limit.
    """
    a = as_matrix(a)
    b = np.asarray(b, dtype=float)
    if a.shape[0] != a.shape[1]:
        raise ValueError(f'Matrix must be square, got shape {a.shape}.')
    if b.shape[0] != a.shape[0]:
        raise ValueError(f'Right hand side has {b.shape[0]} rows, expected {a.shape[0]}.')
    if a.shape[0] == 0:
        return np.zeros(b.shape)

    limit = Thresholds().get('condition_limit')
    with np.errstate(divide='ignore', invalid='ignore'):
        cond = np.linalg.cond(a)
    if not np.isfinite(cond) or cond > limit:
        raise SingularMatrix(f'Matrix condition number {cond:.3g} exceeds {limit:.0e}.')

    lu_piv = scipy.linalg.lu_factor(a, check_finite=False)
    return scipy.linalg.lu_solve(lu_piv, b, check_finite=False)


def sym_inverse(m):
    """
    Invert a symmetric matrix, returning an exactly symmetric result.

    Raises
    ------
    NotSymmetric
        If ``m`` is not symmetric within tolerance.
    SingularMatrix
        If ``m`` is singular.
    """
    m = as_matrix(m)
    _check_symmetric(m)
    m = symmetrize(m)
    return symmetrize(solve_linear(m, np.eye(m.shape[0])))


def min_eigenvalue(m):
    """
    Smallest eigenvalue of a symmetric matrix.

    Raises
    ------
    NotSymmetric
        If ``m`` is not symmetric within tolerance.
    """
    m = as_matrix(m)
    _check_symmetric(m)
    if m.shape[0] == 0:
        return 0.0
    return float(scipy.linalg.eigvalsh(symmetrize(m))[0])


def finite_diff_jacobian(f, x, h=None):
    """
    Central difference Jacobian of a vector valued function.

    Parameters
    ----------
    f : callable
        Maps a 1D array to a 1D array.
    x : `numpy.ndarray`
        Point at which to differentiate.
    h : float, optional
        Step size, defaults to ``1e-6 * max(1, max|x|)``.

    Returns
    -------
    `numpy.ndarray`
        Matrix of shape ``(len(f(x)), len(x))``.

    Raises
    ------
    NonFiniteEvaluation
        If any evaluation of ``f`` is not finite.
    """
    x = as_vector(x)
    if h is None:
        h = Thresholds().get('fd_step_rel') * max(1.0, np.max(np.abs(x), initial=0.0))
    if h <= 0:
        raise ValueError(f'Step size must be positive, got {h}.')

    columns = []
    for j in range(x.size):
        step = np.zeros_like(x)
        step[j] = h
        forward = np.asarray(f(x + step), dtype=float)
        backward = np.asarray(f(x - step), dtype=float)
        if not (np.all(np.isfinite(forward)) and np.all(np.isfinite(backward))):
            raise NonFiniteEvaluation(f'Non-finite evaluation perturbing coordinate {j}.')
        columns.append((forward - backward) / (2 * h))

    if not columns:
        return np.zeros((np.asarray(f(x)).size, 0))
    return np.column_stack(columns)
