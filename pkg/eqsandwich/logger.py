"""
Package logger built on the astropy logging machinery.
"""
import logging

from astropy.logger import AstropyLogger

__all__ = ['EqsandwichLogger']


class EqsandwichLogger(AstropyLogger):
    """
    Logger for eqsandwich.

    Warnings deriving from `~eqsandwich.exceptions.EqsandwichWarning` are
    astropy warnings, so they are routed through this logger when warnings
    logging is enabled.
    """


def _init_log():
    """
    Create the ``eqsandwich`` logger with the astropy default handlers.
    """
    orig_logger_cls = logging.getLoggerClass()
    logging.setLoggerClass(EqsandwichLogger)
    try:
        log = logging.getLogger('eqsandwich')
        log._set_defaults()
    finally:
        logging.setLoggerClass(orig_logger_cls)

    return log
