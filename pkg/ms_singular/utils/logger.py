import logging
import os
import sys
import threading
from types import MethodType
from typing import Optional

init_loggers = {}

RESET = '\033[0m'
LEVEL_COLORS = {
    'DEBUG': '\033[34m',
    'INFO': '\033[32m',
    'WARNING': '\033[33m',
    'ERROR': '\033[31m',
    'CRITICAL': '\033[35m',
}

LOG_FORMAT = '[%(levelname)s:%(name)s] %(message)s'
plain_formatter = logging.Formatter(LOG_FORMAT)

_seen_messages = {'info': set(), 'warning': set()}
_once_lock = threading.Lock()


class ColorFormatter(logging.Formatter):
    """Formatter that colors the levelname when writing to a terminal."""

    def __init__(self, fmt: str, use_color: bool = True) -> None:
        super().__init__(fmt=fmt)
        self.use_color = use_color

    def format(self, record: logging.LogRecord) -> str:
        levelname = record.levelname
        try:
            color = LEVEL_COLORS.get(levelname, '') if self.use_color else ''
            if color:
                record.levelname = f'{color}{levelname}{RESET}'
            return super().format(record)
        finally:
            record.levelname = levelname


def _should_use_color(stream) -> bool:
    # NO_COLOR wins over FORCE_COLOR / LOG_COLOR=1
    if os.getenv('NO_COLOR'):
        return False
    if os.getenv('FORCE_COLOR') or os.getenv('LOG_COLOR') == '1':
        return True
    try:
        return hasattr(stream, 'isatty') and stream.isatty()
    except Exception:
        return False


def _log_once(kind: str, self: logging.Logger, msg: str, *args, **kwargs) -> None:
    key = kwargs.pop('hash_id', msg)
    with _once_lock:
        if key in _seen_messages[kind]:
            return
        _seen_messages[kind].add(key)
    getattr(self, kind)(msg, *args, **kwargs)


def info_once(self: logging.Logger, msg: str, *args, **kwargs) -> None:
    _log_once('info', self, msg, *args, **kwargs)


def warning_once(self: logging.Logger, msg: str, *args, **kwargs) -> None:
    _log_once('warning', self, msg, *args, **kwargs)


def _resolve_level(log_level: Optional[int]) -> int:
    if log_level is not None:
        return log_level
    env_level = os.getenv('LOG_LEVEL', 'INFO').upper()
    return getattr(logging, env_level, logging.INFO)


def get_logger(log_file: Optional[str] = None, log_level: Optional[int] = None, file_mode: str = 'w'):
    """Get the package logger.

    The console handler writes to stderr with a colored levelname on terminals. Repeated calls
    return the same logger; a new ``log_file`` is attached on demand.

    Args:
        log_file: Optional path of a log file to mirror console output into.
        log_level: Logging level. If None, it is read from the ``LOG_LEVEL`` environment variable (default INFO).
        file_mode: Mode used to open ``log_file``.

    Returns:
        The configured ``logging.Logger`` with ``info_once`` and ``warning_once`` helpers bound.
    """
    log_level = _resolve_level(log_level)
    logger_name = __name__.split('.')[0]
    logger = logging.getLogger(logger_name)
    logger.propagate = False

    if logger_name in init_loggers:
        add_file_handler_if_needed(logger, log_file, file_mode, log_level)
        for handler in logger.handlers:
            handler.setLevel(log_level)
        logger.setLevel(log_level)
        return logger

    stream_handler = logging.StreamHandler(stream=sys.stderr)
    use_color = _should_use_color(getattr(stream_handler, 'stream', sys.stderr))
    stream_handler.setFormatter(ColorFormatter(LOG_FORMAT, use_color=use_color))
    stream_handler.setLevel(log_level)
    logger.addHandler(stream_handler)

    add_file_handler_if_needed(logger, log_file, file_mode, log_level)

    logger.setLevel(log_level)
    init_loggers[logger_name] = True
    logger.info_once = MethodType(info_once, logger)
    logger.warning_once = MethodType(warning_once, logger)
    return logger


def add_file_handler_if_needed(logger: logging.Logger, log_file: Optional[str], file_mode: str, log_level: int) -> None:
    """Attach a plain-text FileHandler for ``log_file`` unless one already writes there."""
    if log_file is None:
        return

    abs_path = os.path.abspath(log_file)
    for handler in logger.handlers:
        if isinstance(handler, logging.FileHandler) and getattr(handler, 'baseFilename', None) == abs_path:
            handler.setLevel(log_level)
            return

    file_handler = logging.FileHandler(abs_path, file_mode)
    file_handler.setFormatter(plain_formatter)
    file_handler.setLevel(log_level)
    logger.addHandler(file_handler)
