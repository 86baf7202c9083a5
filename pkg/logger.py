"""
Structured logging for the DPT toolkit.
Console output goes to stderr (stdout carries command results such as metric
lines); an optional file log records function and line of every message.
"""
import logging
import sys
from datetime import datetime
from pathlib import Path

from config import Config

CONSOLE_FORMAT = "%(asctime)s | %(levelname)-8s | %(name)s | %(message)s"
FILE_FORMAT = "%(asctime)s | %(levelname)-8s | %(name)s | %(funcName)s:%(lineno)d | %(message)s"
DATE_FORMAT = '%Y-%m-%d %H:%M:%S'


class CustomFormatter(logging.Formatter):
    """Level-colored console formatter; plain text when the stream is not a terminal."""

    COLORS = {
        logging.DEBUG: "\x1b[38;20m",
        logging.INFO: "\x1b[34;20m",
        logging.WARNING: "\x1b[33;20m",
        logging.ERROR: "\x1b[31;20m",
        logging.CRITICAL: "\x1b[31;1m",
    }
    RESET = "\x1b[0m"

    def __init__(self, use_color: bool = True):
        super().__init__(CONSOLE_FORMAT, datefmt=DATE_FORMAT)
        self._colored = {
            level: logging.Formatter(color + CONSOLE_FORMAT + self.RESET, datefmt=DATE_FORMAT)
            for level, color in self.COLORS.items()
        } if use_color else {}

    def format(self, record):
        formatter = self._colored.get(record.levelno)
        return formatter.format(record) if formatter else super().format(record)


def setup_logger(name: str = "DPT") -> logging.Logger:
    """
    Get a component logger, attaching handlers on first use.

    Args:
        name: Component name shown in every line

    Returns:
        Configured logger instance
    """
    logger = logging.getLogger(name)
    logger.setLevel(getattr(logging, Config.LOG_LEVEL.upper(), logging.INFO))
    if logger.handlers:
        return logger

    console_handler = logging.StreamHandler(sys.stderr)
    console_handler.setFormatter(CustomFormatter(use_color=sys.stderr.isatty()))
    logger.addHandler(console_handler)

    if Config.LOG_TO_FILE:
        log_dir = Path(Config.LOG_DIR)
        log_dir.mkdir(parents=True, exist_ok=True)
        file_handler = logging.FileHandler(log_dir / Config.LOG_FILE, mode='a', encoding='utf-8')
        file_handler.setFormatter(logging.Formatter(FILE_FORMAT, datefmt=DATE_FORMAT))
        logger.addHandler(file_handler)

    logger.propagate = False
    return logger


def log_training_event(logger: logging.Logger, event_type: str, data: dict):
    """
    Log one training or evaluation event as `[TYPE] time | key=value | ...`.

    Floats are shown with 6 significant digits. Events: SYNTH, EPOCH, PRUNE,
    STAGE_DONE, EVAL, DENOISE.
    """
    fields = " | ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}" for k, v in data.items())
    logger.info(f"[{event_type}] {datetime.now().isoformat(timespec='seconds')} | {fields}")
