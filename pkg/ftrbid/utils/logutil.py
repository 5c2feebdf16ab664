"""
Logging setup shared by the command line, the library and worker processes.

Worker processes started by :class:`ftrbid.utils.multi_proc.TPool` push their records onto
`mp_queue`; a listener thread in the main process hands them to the logger they were created by.
"""
import atexit
import errno
import logging.config
import logging.handlers
import multiprocessing as mp
import os
import pathlib
import sys
import warnings

import appdirs
import yaml

import ftrbid

mp_queue = mp.Queue()

_listener = None

# Lowest level first, as (threshold, character) pairs.
LEVEL_CHARS = (
    (logging.DEBUG, "*"),
    (logging.INFO, "+"),
    (logging.WARNING, "-"),
    (logging.ERROR, "!"),
)


class LevelCharFilter(logging.Filter):
    """Adds the `level_char` format variable ("[+] Stage network started.")."""

    def filter(self, record):
        record.level_char = " "
        for threshold, char in LEVEL_CHARS:
            if record.levelno >= threshold:
                record.level_char = char
        return True


class MPRotatingFileHandler(logging.handlers.RotatingFileHandler):
    """
    Rotating log file placed in the user log directory unless given an absolute path.
    A rollover refused because a worker still holds the file open is skipped.
    """

    def __init__(self, filename, **kwargs):
        path = pathlib.Path(os.path.expandvars(filename)).expanduser()
        if not path.is_absolute():
            path = pathlib.Path(appdirs.user_log_dir("ftrbid", appauthor=False)) / path
        path.parent.mkdir(parents=True, exist_ok=True)
        super().__init__(os.fspath(path), **kwargs)

    def doRollover(self):
        try:
            super().doRollover()
        except PermissionError as e:
            if sys.platform != "win32" or e.errno != errno.EACCES:
                raise
            logging.getLogger(__name__).debug(f"Skipped rollover of {self.baseFilename}: {e}")


class MPChildHandler(logging.handlers.QueueHandler):
    """
    Queue handler used inside worker processes.
    Records are flattened to their formatted message so they pickle.
    """


class _LoggerRouter(logging.Handler):
    """Hands a record received from a worker to the logger that created it."""

    def handle(self, record):
        logger = logging.getLogger(record.name)
        if logger.isEnabledFor(record.levelno):
            logger.handle(record)
        return True

    def emit(self, record):
        self.handle(record)


def start_listener():
    """Starts the main process thread relaying worker log records. Safe to call repeatedly."""
    global _listener
    if mp.current_process().name != "MainProcess" or _listener is not None:
        return
    _listener = logging.handlers.QueueListener(mp_queue, _LoggerRouter())
    _listener.start()
    atexit.register(_listener.stop)


def _apply_config_file(path: str, default_level: int):
    try:
        with open(path, "rt") as fo:
            logging.config.dictConfig(yaml.safe_load(fo))
    except (OSError, ValueError, TypeError, yaml.YAMLError) as e:
        warnings.warn(f"Unable to set log config file: {path} with error: {e}")
        logging.basicConfig(level=default_level)


def setup_logging(default_level=logging.INFO, queue=None):
    """
    Configures logging from the file named by FTRBID_LOG_CFG, falling back to the
    LOG_CONFIG_PATH configuration entry. FTRBID_LOG_LEVEL then overrides the root level.

    :param default_level: Root level used when no log config file is usable.
    :param queue: Queue to forward records to. (worker processes only)
    """
    if queue is not None:
        assert mp.current_process().name != "MainProcess"
        logging.root.addHandler(MPChildHandler(queue))
        # Without fork the worker has no level configured, so the main process filters instead.
        if mp.get_start_method() != "fork":
            logging.root.setLevel(logging.DEBUG)
        return

    log_config = os.getenv("FTRBID_LOG_CFG") or ftrbid.config.get("LOG_CONFIG_PATH")
    if log_config:
        _apply_config_file(log_config, default_level)
    else:
        logging.basicConfig(level=default_level)

    level = os.getenv("FTRBID_LOG_LEVEL")
    if level:
        try:
            logging.root.setLevel(level.upper())
        except ValueError:
            warnings.warn(f"Invalid FTRBID_LOG_LEVEL: {level}")

    start_listener()
