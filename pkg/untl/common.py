import os
import json
import logging
import sys

# Environment variables
LOG_LEVEL = os.environ.get('UNTL_LOG_LEVEL', 'INFO')
LOG_FORMAT = os.environ.get('UNTL_LOG_FORMAT', 'text')
SHOW_PROGRESS = os.environ.get('UNTL_SHOW_PROGRESS', 'false').lower() == 'true'
EVAL_BATCH = int(os.environ.get('UNTL_EVAL_BATCH', '256'))

# File format versions
CHECKPOINT_VERSION = 1
RECORD_FORMAT_VERSION = 1

TEXT_FORMAT = '%(asctime)s - %(levelname)s - %(name)s - %(message)s'


class UNTLError(Exception):
    """Base class for every error raised by this package"""
    pass


class ShapeError(UNTLError):
    """Operands of a graph op have incompatible shapes"""
    pass


class GraphError(UNTLError):
    """Graph misuse: unbound inputs, backward before forward, non-scalar output"""
    pass


class NonFiniteError(UNTLError):
    """A value or gradient became NaN/Inf, or log saw a non-positive input"""
    pass


class ConfigError(UNTLError):
    """Invalid configuration, hyperparameters, key or synthetic spec"""
    pass


class DataFormatError(UNTLError):
    """Malformed corpus or vocabulary file"""
    pass


class CheckpointError(UNTLError):
    """Checkpoint file is corrupt or was written by another format version"""
    pass


class TrainingAbort(UNTLError):
    """Training diverged; carries the optimizer step where it happened"""

    def __init__(self, step: int, message: str):
        super().__init__(f"step {step}: {message}")
        self.step = step


class JsonFormatter(logging.Formatter):
    """One JSON object per log line"""

    def format(self, record: logging.LogRecord) -> str:
        payload = {
            'time': self.formatTime(record),
            'level': record.levelname,
            'logger': record.name,
            'message': record.getMessage(),
        }
        if record.exc_info:
            payload['exc_info'] = self.formatException(record.exc_info)
        return json.dumps(payload, sort_keys=True)


def configure_logging(level: str = None, fmt: str = None) -> None:
    """Install a single stderr handler on the package logger"""
    level = (level or LOG_LEVEL).upper()
    fmt = fmt or LOG_FORMAT

    handler = logging.StreamHandler(sys.stderr)
    if fmt == 'json':
        handler.setFormatter(JsonFormatter())
    else:
        handler.setFormatter(logging.Formatter(TEXT_FORMAT))

    logger = logging.getLogger('untl')
    logger.handlers = [handler]
    logger.setLevel(level)
    logger.propagate = False
