"""
Central registry of the numerical thresholds used across the package.
"""

__all__ = ['Thresholds']

THRESHOLDS = {
    'condition_limit': 1e12,  # condition number above which a matrix is singular
    'symmetry_tol': 1e-8,
    'positivity_floor': 1e-6,  # treatment probabilities must lie in [floor, 1 - floor]
    'separation_bound': 50.0,  # max |theta| for logistic coefficients
    'q_bound': 1e6,  # max |q| for SNMM q-functions
    'diagnostic_pass': 0.05,
    'diagnostic_warn': 0.2,
    'solver_tol': 1e-9,
    'nuisance_tol': 1e-10,  # logistic score equations are solved at least this tightly
    'solver_max_iter': 200,
    'solver_max_halvings': 50,
    'solver_step_rel': 1e-12,  # Newton steps below this relative size count as converged
    'fd_step_rel': 1e-6,
    'bootstrap_min_b': 200,
    'failure_cap': 0.02,  # fraction of replicates allowed to fail
    'scenario_min_n': 50,
    'scenario_min_propensity': 0.05,
    'max_horizon': 10,
}


class _SharedRegistry(type):
    """
    Metaclass handing out one instance per registry class, so every module
    reads the same threshold values.
    """
    _registries = {}

    def __call__(cls):
        if cls not in cls._registries:
            cls._registries[cls] = super().__call__()
        return cls._registries[cls]


class Thresholds(metaclass=_SharedRegistry):
    """
    Centralised threshold representation.

    Examples
    --------
    >>> from eqsandwich.constants import Thresholds
    >>> Thresholds().get('positivity_floor')
    1e-06
    """
    def __init__(self):
        self._values = dict(THRESHOLDS)

    def get(self, name):
        """
        Return the value of a threshold.

        Parameters
        ----------
        name : str
            Name of the threshold.

        Returns
        -------
        float or int
            Value of the threshold.
        """
        if name not in self._values:
            raise ValueError(f'Valid names are {sorted(self._values)} not {name}.')

        return self._values[name]
