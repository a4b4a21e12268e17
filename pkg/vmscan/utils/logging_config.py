"""
Logging setup for vmscan.

Services log through module loggers; this module wires the 'vmscan' logger once
from the [logging] section of the configuration.
"""

import logging
from typing import Optional

from .config import Config

LOG_FORMAT = '%(asctime)s %(levelname)s %(name)s: %(message)s'


def configure_logging(config: Config, verbosity: int = 0) -> logging.Logger:
    """
    Configure the 'vmscan' logger hierarchy.

    Args:
        config: Configuration providing level and optional log file
        verbosity: Number of -v flags; 1 forces INFO, 2 or more DEBUG

    Returns:
        The configured 'vmscan' logger
    """
    level = logging.getLevelName(config.log_level.upper())
    if not isinstance(level, int):
        level = logging.WARNING
    if verbosity >= 2:
        level = logging.DEBUG
    elif verbosity == 1:
        level = min(level, logging.INFO)

    handler: Optional[logging.Handler]
    if config.log_file:
        handler = logging.FileHandler(config.log_file)
    else:
        handler = logging.StreamHandler()
    handler.setFormatter(logging.Formatter(LOG_FORMAT))

    logger = logging.getLogger('vmscan')
    for old in list(logger.handlers):
        logger.removeHandler(old)
        old.close()
    logger.addHandler(handler)
    logger.setLevel(level)
    logger.propagate = False
    return logger
