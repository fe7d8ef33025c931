import logging
import sys

from .settings import DEBUG


# Set stream logger to logging root; stdout is reserved for CLI tables
logFormatter = logging.Formatter(
    "[%(asctime)s] [%(threadName)-15.15s] [%(levelname)-5.5s]  %(message)s"
)
rootLogger = logging.getLogger()

if not any(getattr(h, "_graph_informer", False) for h in rootLogger.handlers):
    consoleHandler = logging.StreamHandler(sys.stderr)
    consoleHandler.setFormatter(logFormatter)
    consoleHandler._graph_informer = True
    rootLogger.addHandler(consoleHandler)


def set_local_logger(name: str):
    logger = logging.getLogger(name)
    if DEBUG:
        logger.setLevel(logging.DEBUG)
    else:
        logger.setLevel(logging.INFO)
    return logger


def attach_file_handler(path: str, level=logging.INFO) -> logging.Handler:
    """Mirror log records into a file next to the run reports."""
    file_handler = logging.FileHandler(path, encoding="utf-8")
    file_handler.setFormatter(logFormatter)
    file_handler.setLevel(level)
    rootLogger.addHandler(file_handler)
    return file_handler
