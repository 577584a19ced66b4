# emacs: -*- mode: python-mode; py-indent-offset: 4; tab-width: 4; indent-tabs-mode: nil -*-
# ex: set sts=4 ts=4 sw=4 et:
"""LAP -- Local Attention Pooling.
"""
__all__ = ["cli", "config", "database", "evaluate", "exceptions", "export",
           "interpret", "losses", "network", "pooling", "set_logging_level",
           "surgery", "synth", "tests", "train", "__version__"]

import logging
import sys
import os

from .version import __version__


def set_logging_level(level=None):
    """Set package-wide logging level

    Args
        level : Logging level constant from logging module (warning, error, info, etc.)
    """
    if level is None:
        level = os.environ.get('LAP_LOGLEVEL', 'warn')
    level = level.upper()
    if level == 'WARN':
        level = 'WARNING'
    logger.setLevel(getattr(logging, level))
    return logger.getEffectiveLevel()


def _setup_logger(logger):
    # Basic logging setup
    console = logging.StreamHandler(sys.stdout)
    console.setFormatter(logging.Formatter("%(levelname)-6s %(module)-7s %(message)s"))
    logger.addHandler(console)
    set_logging_level()

# Set up logger
logger = logging.getLogger("lap")
_setup_logger(logger)
