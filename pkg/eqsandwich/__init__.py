# Licensed under a 3-clause BSD style license - see LICENSE.rst
"""
Two-stage M-estimation with nuisance-corrected sandwich variances.
"""
try:
    from .version import __version__
except ImportError:
    __version__ = 'unknown'

from .logger import _init_log

log = _init_log()

__all__ = ['log']
