import logging

from fedprompt.config import Config

__version__ = "0.3.0"


def create_logger() -> logging.Logger:
    """Configure the package logger.

    :return: the ``fedprompt`` logger with a single stream handler
    :rtype: logging.Logger
    """
    logger = logging.getLogger("fedprompt")
    for handler in list(logger.handlers):
        logger.removeHandler(handler)
    handler = logging.StreamHandler()
    handler.setFormatter(logging.Formatter("[%(asctime)s] %(levelname)s: %(message)s"))
    logger.addHandler(handler)
    logger.setLevel(Config.LOG_LEVEL)
    return logger
