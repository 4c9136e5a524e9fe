"""Logging configuration for the counterfactual pipeline."""

import json
import logging
import os
import sys
from datetime import datetime
from typing import Optional

LOGGER_NAME = 'disc'

# LogRecord attributes that are not user-supplied ``extra`` fields
_RESERVED = set(vars(logging.LogRecord('', 0, '', 0, '', None, None))) | {'message', 'asctime'}


class JsonLinesFormatter(logging.Formatter):
    """Format records as one JSON object per line.

    Any ``extra={...}`` fields passed to the logging call are merged into
    the object, so structured values (metrics, paths) stay machine-readable.
    """

    def format(self, record: logging.LogRecord) -> str:
        payload = {
            'ts': datetime.fromtimestamp(record.created).isoformat(timespec='milliseconds'),
            'level': record.levelname,
            'logger': record.name,
            'message': record.getMessage(),
        }
        for key, value in record.__dict__.items():
            if key not in _RESERVED and not key.startswith('_'):
                payload[key] = value
        if record.exc_info:
            payload['exc_info'] = self.formatException(record.exc_info)
        return json.dumps(payload, default=str)


def setup_logging(
    log_dir: str = 'logs',
    log_level: Optional[str] = None,
    json_stdout: bool = True,
) -> logging.Logger:
    """Set up logging configuration for the application.

    Args:
        log_dir: Directory to store log files (None disables the file handler)
        log_level: Console logging level (DEBUG, INFO, WARNING, ERROR, CRITICAL);
            defaults to the DISC_LOG_LEVEL environment variable or INFO
        json_stdout: Emit JSON-lines records on stdout

    Returns:
        Configured logger instance
    """
    log_level = (log_level or os.getenv('DISC_LOG_LEVEL', 'INFO')).upper()

    logger = logging.getLogger(LOGGER_NAME)
    logger.setLevel(logging.DEBUG)
    logger.propagate = False

    # Clear existing handlers to avoid duplicates
    for handler in list(logger.handlers):
        handler.close()
    logger.handlers.clear()

    log_file = None
    if log_dir:
        os.makedirs(log_dir, exist_ok=True)
        timestamp = datetime.now().strftime('%Y%m%d')
        log_file = os.path.join(log_dir, f'disc_{timestamp}.log')

        file_handler = logging.FileHandler(log_file)
        file_handler.setLevel(logging.DEBUG)
        file_handler.setFormatter(logging.Formatter(
            '%(asctime)s - %(name)s - %(levelname)s - %(funcName)s:%(lineno)d - %(message)s',
            datefmt='%Y-%m-%d %H:%M:%S'
        ))
        logger.addHandler(file_handler)

    if json_stdout:
        json_handler = logging.StreamHandler(sys.stdout)
        json_handler.setLevel(getattr(logging, log_level))
        json_handler.setFormatter(JsonLinesFormatter())
        logger.addHandler(json_handler)

    console_handler = logging.StreamHandler(sys.stderr)
    console_handler.setLevel(logging.WARNING if json_stdout else getattr(logging, log_level))
    console_handler.setFormatter(logging.Formatter('%(levelname)s - %(message)s'))
    logger.addHandler(console_handler)

    logger.debug(f"Logging initialized. Log file: {log_file}")

    return logger


def get_logger() -> logging.Logger:
    """Get the configured logger instance.

    Returns:
        Logger instance
    """
    return logging.getLogger(LOGGER_NAME)


def progress(message: str) -> None:
    """Print a human-readable progress line on stderr."""
    print(message, file=sys.stderr, flush=True)
