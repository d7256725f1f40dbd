"""Logging configuration for peakcr."""

import logging
import os
import sys
from datetime import datetime
from pathlib import Path

LOG_DIR_ENV = "PEAKCR_LOG_DIR"
DEFAULT_LOG_DIR = Path(".logs")
# Replicates run on worker threads, so the thread name is part of every record.
LOG_FORMAT = "%(asctime)s | %(levelname)-8s | %(threadName)s | %(name)s | %(message)s"
LOG_DATE_FORMAT = "%Y-%m-%d %H:%M:%S"
LOG_RETENTION_DAYS = 7


def resolve_log_dir(log_dir: Path | None = None) -> Path:
    """Pick the log directory: explicit argument, then $PEAKCR_LOG_DIR, then .logs."""
    if log_dir is not None:
        return log_dir
    env_dir = os.environ.get(LOG_DIR_ENV)
    return Path(env_dir) if env_dir else DEFAULT_LOG_DIR


def _get_log_file(log_dir: Path) -> Path:
    """Get the log file path for today.

    Uses date-stamped filenames (peakcr.2024-01-31.log). If that file exists but
    isn't writable, or can't be created, falls back to a timestamped name.

    Args:
        log_dir: Directory for log files.

    Returns:
        Path to the log file.
    """
    now = datetime.now()
    log_file = log_dir / f"peakcr.{now:%Y-%m-%d}.log"
    fallback = log_dir / f"peakcr.{now:%Y-%m-%d_%H-%M-%S}.log"

    if log_file.exists():
        return log_file if os.access(log_file, os.W_OK) else fallback

    try:
        log_file.touch()
    except PermissionError:
        return fallback
    return log_file


def _cleanup_old_logs(log_dir: Path) -> int:
    """Remove log files older than LOG_RETENTION_DAYS.

    Args:
        log_dir: Directory containing log files.

    Returns:
        Number of files removed.
    """
    cutoff = datetime.now().timestamp() - LOG_RETENTION_DAYS * 86400
    removed = 0
    for log_file in log_dir.glob("peakcr.*.log"):
        try:
            if log_file.stat().st_mtime < cutoff:
                log_file.unlink()
                removed += 1
        except OSError:
            continue
    return removed


def setup_logging(
    level: int = logging.INFO,
    log_dir: Path | None = None,
    verbose: bool = False,
    file_logging: bool = True,
) -> None:
    """Configure logging for peakcr.

    Sets up:
    - File logging with date-stamped filenames and seven-day retention
    - Console output on stderr in verbose mode (stdout carries results only)
    - Python warnings (numpy/scipy runtime warnings) sent to the same handlers

    Args:
        level: Logging level for the file handler (default: INFO).
        log_dir: Directory for log files (default: $PEAKCR_LOG_DIR or .logs).
        verbose: Whether to also log debug output to stderr.
        file_logging: Whether to write a log file at all.
    """
    logger = logging.getLogger("peakcr")
    logger.setLevel(logging.DEBUG if verbose else level)
    logger.handlers.clear()
    logging.captureWarnings(True)

    formatter = logging.Formatter(LOG_FORMAT, LOG_DATE_FORMAT)
    log_file: Path | None = None

    if file_logging:
        directory = resolve_log_dir(log_dir)
        directory.mkdir(parents=True, exist_ok=True)
        removed = _cleanup_old_logs(directory)
        log_file = _get_log_file(directory)
        file_handler = logging.FileHandler(log_file, encoding="utf-8")
        file_handler.setLevel(level)
        file_handler.setFormatter(formatter)
        logger.addHandler(file_handler)
        if removed:
            logger.debug(f"Removed {removed} expired log files from {directory}")

    if verbose:
        console_handler = logging.StreamHandler(sys.stderr)
        console_handler.setLevel(logging.DEBUG)
        console_handler.setFormatter(formatter)
        logger.addHandler(console_handler)

    if not logger.handlers:
        logger.addHandler(logging.NullHandler())

    warnings_logger = logging.getLogger("py.warnings")
    warnings_logger.handlers.clear()
    for handler in logger.handlers:
        warnings_logger.addHandler(handler)
    warnings_logger.propagate = False

    logger.info(f"Logging initialized - log file: {log_file}, verbose: {verbose}")


def get_logger(name: str) -> logging.Logger:
    """Get a logger for a specific module.

    Args:
        name: Module name (will be prefixed with 'peakcr.').

    Returns:
        Logger instance.
    """
    return logging.getLogger(f"peakcr.{name}")
