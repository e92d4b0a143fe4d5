"""
Variance estimators for psi from one set of empirical moments.

With ``B = P_n dU1/dpsi``, ``M = P_n U1 U1^T``, ``C = P_n U1 U2^T`` and
``F = P_n U2 U2^T``:

* naive sandwich ``B^-1 M B^-T / n`` ignores estimation of theta;
* score-corrected sandwich ``B^-1 (M - C F^-1 C^T) B^-T / n`` is valid when
  U2 is a partial score;
* general sandwich ``B^-1 P_n[(U1 - D U2)^2] B^-T / n`` with
  ``D = (P_n dU1/dtheta)(P_n dU2/dtheta)^-1`` is valid for any unbiased U2.

All expectations are replaced by averages at the fitted parameters; there is
no degrees-of-freedom correction.
"""
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import stats

from eqsandwich import numkit
from eqsandwich.constants import Thresholds
from eqsandwich.exceptions import PartialScoreWarning

__all__ = ['IdentityDiagnostics', 'VarianceReport', 'sandwich_naive',
           'sandwich_corrected_score', 'correction_term', 'sandwich_general',
           'projection_residuals', 'identity_diagnostics', 'diagnostic_status',
           'variance_report', 'wald_intervals', 'contrast_variance']

ESTIMATORS = ('naive', 'corrected_score', 'general')


def _sandwich(bread, filling, n):
    left = numkit.solve_linear(bread, filling)
    return numkit.symmetrize(numkit.solve_linear(bread, left.T).T / n)


def sandwich_naive(m):
    """
    Sandwich variance that treats theta as known.

    Parameters
    ----------
    m : `~eqsandwich.eecore.MomentEstimates`

    Returns
    -------
    `numpy.ndarray`
        ``(p, p)`` covariance of psi hat.

    Raises
    ------
    SingularMatrix
        If the bread is singular.
    """
    return _sandwich(m.bread, m.meat, m.n)


def correction_term(m, var_theta=None):
    """
    Positive semi-definite amount to subtract from the naive sandwich.

    Parameters
    ----------
    m : `~eqsandwich.eecore.MomentEstimates`
    var_theta : `numpy.ndarray`, optional
        Estimated covariance of theta hat as reported by a fitting routine. The
        nuisance Fisher information is then ``(var_theta n)^-1`` instead of
        ``m.fisher``.

    Returns
    -------
    `numpy.ndarray`
    """
    if m.q == 0:
        return np.zeros((m.p, m.p))
    if var_theta is None:
        fisher_inv = numkit.sym_inverse(m.fisher)
    else:
        fisher_inv = numkit.as_matrix(var_theta) * m.n
    filling = numkit.symmetrize(m.cross @ fisher_inv @ m.cross.T)
    return _sandwich(m.bread, filling, m.n)


def sandwich_corrected_score(m):
    """
    Naive sandwich minus the correction for estimating theta by a partial score.

    Warns with `~eqsandwich.exceptions.PartialScoreWarning` when the moments
    come from a nuisance equation that is not a score; the general sandwich is
    the valid choice then.
    """
    if not m.theta_is_partial_score:
        warnings.warn('The score-corrected sandwich assumes theta solves partial score '
                      'equations; use the general sandwich instead.', PartialScoreWarning)
    return sandwich_naive(m) - correction_term(m)


def sandwich_general(m):
    """
    General-correction sandwich, valid for any unbiased nuisance estimating equation.

    Requires the per-unit ``u1_rows`` and ``u2_rows`` of the moments.

    Raises
    ------
    SingularMatrix
        If the bread or the average nuisance Jacobian is singular.
    """
    if m.u1_rows is None or m.u2_rows is None:
        raise ValueError('The general sandwich needs the per-unit U1 and U2 values.')
    if m.q == 0:
        residuals = m.u1_rows
    else:
        # D = d_theta_u1 d_theta_u2^-1
        coeff = numkit.solve_linear(m.d_theta_u2.T, m.d_theta_u1.T).T
        residuals = m.u1_rows - m.u2_rows @ coeff.T
    filling = numkit.symmetrize(residuals.T @ residuals / m.n)
    return _sandwich(m.bread, filling, m.n)


def projection_residuals(m, u1_rows, u2_rows):
    """
    Project U1 on the span of U2.

    Returns
    -------
    a_hat : `numpy.ndarray`
        ``(p, q)`` coefficient ``C F^-1``.
    u1_tilde : `numpy.ndarray`
        ``(n, p)`` residuals ``U1 - a_hat U2``, uncorrelated with U2 in sample.

    Raises
    ------
    SingularMatrix
        If the nuisance Fisher information is singular.
    """
    a_hat = m.cross @ numkit.sym_inverse(m.fisher)
    return a_hat, np.asarray(u1_rows) - np.asarray(u2_rows) @ a_hat.T


@dataclass(frozen=True)
class IdentityDiagnostics:
    """
    Empirical checks of the score identities.

    ``ddtheta_gap`` compares ``P_n dU1/dtheta`` with ``-P_n U1 U2^T``,
    ``fisher_gap`` compares ``P_n dU2/dtheta`` with ``-P_n U2 U2^T`` (both
    relative sup-norm gaps) and ``orthogonality_gap`` is the sup-norm of
    ``P_n U1_tilde U2^T``. Without a nuisance the gaps are zero and
    ``applicable`` is false.
    """
    ddtheta_gap: float
    fisher_gap: float
    orthogonality_gap: float
    applicable: bool = True

    def status(self):
        """
        ``pass``/``warn``/``fail`` per gap, or ``not-applicable``.
        """
        gaps = ('ddtheta_gap', 'fisher_gap', 'orthogonality_gap')
        if not self.applicable:
            return {gap: 'not-applicable' for gap in gaps}
        return {gap: diagnostic_status(getattr(self, gap)) for gap in gaps}

    def to_dict(self):
        return {'ddtheta_gap': self.ddtheta_gap, 'fisher_gap': self.fisher_gap,
                'orthogonality_gap': self.orthogonality_gap, 'applicable': self.applicable,
                'status': self.status()}


def diagnostic_status(gap):
    thresholds = Thresholds()
    if gap < thresholds.get('diagnostic_pass'):
        return 'pass'
    if gap < thresholds.get('diagnostic_warn'):
        return 'warn'
    return 'fail'


def _relative_gap(a, b):
    # sup-norm of a + b relative to the larger of the two
    scale = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(b), initial=0.0))
    gap = np.max(np.abs(a + b), initial=0.0)
    return float(gap / scale) if scale > 0 else 0.0


def identity_diagnostics(m):
    """
    Relative gaps of the identities ``E dU1/dtheta = -E U1 U2^T`` and
    ``E dU2/dtheta = -E U2 U2^T``, plus the orthogonality of projection residuals.

    Returns
    -------
    `IdentityDiagnostics`
    """
    if m.q == 0:
        return IdentityDiagnostics(0.0, 0.0, 0.0, applicable=False)
    if m.u1_rows is not None and m.u2_rows is not None:
        _, u1_tilde = projection_residuals(m, m.u1_rows, m.u2_rows)
        orthogonality = u1_tilde.T @ m.u2_rows / m.n
    else:
        orthogonality = m.cross - m.cross @ numkit.sym_inverse(m.fisher) @ m.fisher
    return IdentityDiagnostics(
        ddtheta_gap=_relative_gap(m.d_theta_u1, m.cross),
        fisher_gap=_relative_gap(m.d_theta_u2, m.fisher),
        orthogonality_gap=float(np.max(np.abs(orthogonality), initial=0.0)))


@dataclass(frozen=True, eq=False)
class VarianceReport:
    """
    Every variance estimate for psi hat computed from one `~eqsandwich.eecore.MomentEstimates`.

    ``corrected_score`` is None when the nuisance is not a partial score.
    ``projection_coeff`` is the ``(p, q)`` coefficient of U1 on U2.
    """
    naive: np.ndarray
    corrected_score: np.ndarray
    general: np.ndarray
    correction: np.ndarray
    projection_coeff: np.ndarray
    diagnostics: IdentityDiagnostics
    n: int

    def covariance(self, estimator):
        if estimator not in ESTIMATORS:
            raise ValueError(f'Unknown variance estimator {estimator}; use one of {ESTIMATORS}.')
        return getattr(self, estimator)

    def to_dict(self):
        def listed(matrix):
            return None if matrix is None else np.asarray(matrix).tolist()

        return {'naive': listed(self.naive), 'corrected_score': listed(self.corrected_score),
                'general': listed(self.general), 'correction': listed(self.correction),
                'projection_coeff': listed(self.projection_coeff),
                'diagnostics': self.diagnostics.to_dict(), 'n': int(self.n)}


def variance_report(m):
    """
    Compute all variance blocks and the identity diagnostics.

    The score-corrected block is left out (None) when ``m`` is flagged as not
    coming from a partial score, so reports never carry an invalid estimate.
    """
    naive = sandwich_naive(m)
    correction = correction_term(m)
    corrected = naive - correction if m.theta_is_partial_score else None
    general = sandwich_general(m) if m.u1_rows is not None else None
    if m.q == 0:
        projection = np.zeros((m.p, 0))
    else:
        projection = m.cross @ numkit.sym_inverse(m.fisher)
    return VarianceReport(naive=naive, corrected_score=corrected, general=general,
                          correction=correction, projection_coeff=projection,
                          diagnostics=identity_diagnostics(m), n=m.n)


def wald_intervals(psi, covariance, level=0.95):
    """
    Wald intervals ``psi +/- z sqrt(diag(covariance))``.

    Returns
    -------
    lower, upper : `numpy.ndarray`
    """
    if not 0 < level < 1:
        raise ValueError(f'level must be in (0, 1), got {level}.')
    z = stats.norm.ppf(0.5 + level / 2)
    half = z * np.sqrt(np.clip(np.diag(covariance), 0, None))
    psi = np.asarray(psi, dtype=float)
    return psi - half, psi + half


def contrast_variance(covariance, contrast):
    """
    Variance ``c^T covariance c`` of a linear contrast.
    """
    contrast = np.asarray(contrast, dtype=float)
    return float(contrast @ np.asarray(covariance) @ contrast)
