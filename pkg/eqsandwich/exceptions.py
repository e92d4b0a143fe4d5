"""
Errors and warnings raised by eqsandwich.

Numerical failures derive from `EstimationError` so callers that drop failed
fits (bootstrap replicates, Monte Carlo replications) can catch one class.
"""
from astropy.utils.exceptions import AstropyUserWarning

__all__ = ['EqsandwichError', 'EstimationError', 'SingularMatrix', 'SingularJacobian',
           'NotSymmetric', 'NonFiniteEvaluation', 'NoConvergence', 'Separation',
           'Positivity', 'UnorderedRecords', 'TooManyFailures', 'ConfigError',
           'EqsandwichWarning', 'PositivityWarning', 'PartialScoreWarning']


class EqsandwichError(Exception):
    """
    Base class for all eqsandwich errors.
    """


class EstimationError(EqsandwichError):
    """
    A numerical step of an estimation pipeline failed.
    """


class SingularMatrix(EstimationError):
    """
    A matrix that must be inverted is singular or too badly conditioned.
    """


class SingularJacobian(SingularMatrix):
    """
    The Jacobian of the stacked estimating equations is singular at a Newton step.
    """


class NotSymmetric(EstimationError):
    """
    A matrix expected to be symmetric is not, within tolerance.
    """


class NonFiniteEvaluation(EstimationError):
    """
    A function evaluation produced NaN or Inf.
    """


class NoConvergence(EstimationError):
    """
    The root finder hit its iteration or step-halving cap.
    """


class Separation(EstimationError):
    """
    Logistic coefficients diverge: the treatment is (quasi-)perfectly separated.
    """


class Positivity(EstimationError):
    """
    A treatment probability fell outside the positivity floor.
    """


class UnorderedRecords(EqsandwichError, ValueError):
    """
    Longitudinal records are not sorted by (id, k) or have gaps.
    """


class TooManyFailures(EqsandwichError):
    """
    Too many bootstrap replicates or Monte Carlo replications failed.
    """


class ConfigError(EqsandwichError, ValueError):
    """
    A run configuration is malformed.
    """


class EqsandwichWarning(AstropyUserWarning):
    """
    Base class for eqsandwich warnings.
    """


class PositivityWarning(EqsandwichWarning):
    """
    Fitted probabilities are outside the positivity floor.
    """


class PartialScoreWarning(EqsandwichWarning):
    """
    The score-corrected sandwich was requested for a nuisance that is not a partial score.
    """
