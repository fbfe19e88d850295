import logging
import logging.handlers
import sys
from pathlib import Path
from typing import Dict, Any, Optional

LOGGER_NAME = "diarization_toolkit"


def setup_logger(config: Dict[str, Any]) -> logging.Logger:
    """
    Set up the toolkit logger.

    Console output goes to stderr; stdout carries the reports.

    Args:
        config: Logging configuration
    Returns:
        configured logger
    """
    #get configuration
    log_level = getattr(logging, str(config["level"]).upper())
    log_format = config["format"]
    log_file = config.get("file")
    max_bytes = config.get("max_size", 10485760)
    backup_count = config.get("backup_count", 5)

    #create logger
    logger = logging.getLogger(LOGGER_NAME)
    logger.setLevel(log_level)

    #Remove existing handler
    for handler in logger.handlers[:]:
        logger.removeHandler(handler)

    #create console handler
    console_handler = logging.StreamHandler(sys.stderr)
    console_handler.setLevel(log_level)
    console_handler.setFormatter(logging.Formatter(log_format))
    logger.addHandler(console_handler)

    #create file handler
    if log_file:
        Path(log_file).parent.mkdir(parents=True, exist_ok=True)
        file_handler = logging.handlers.RotatingFileHandler(
            log_file,
            maxBytes=max_bytes,
            backupCount=backup_count,
        )
        file_handler.setLevel(log_level)
        file_handler.setFormatter(logging.Formatter(log_format))
        logger.addHandler(file_handler)

    return logger


def get_logger(name: Optional[str] = None) -> logging.Logger:
    """Return the toolkit logger or one of its children."""
    if not name:
        return logging.getLogger(LOGGER_NAME)
    return logging.getLogger(f"{LOGGER_NAME}.{name.rsplit('.', 1)[-1]}")
