"""
Structured JSON Lines (JSONL) logger for the simulator.

Provides consistent logging across all components with proper formatting.
"""

import json
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Optional, Union


class LogLevel(str, Enum):
    """Log severity levels"""
    DEBUG = "DEBUG"
    INFO = "INFO"
    WARNING = "WARNING"
    ERROR = "ERROR"

    @property
    def rank(self) -> int:
        return _LEVEL_RANK[self]


_LEVEL_RANK = {
    LogLevel.DEBUG: 10,
    LogLevel.INFO: 20,
    LogLevel.WARNING: 30,
    LogLevel.ERROR: 40,
}

DEFAULT_LOG_DIR = Path("SHARED/logs")


class JsonLogger:
    """
    JSONL logger for structured logging.

    Each log entry is a single JSON object per line for efficient streaming and parsing.
    Entries below the configured level are dropped.
    """

    def __init__(
        self,
        component: str,
        log_dir: Optional[Union[str, Path]] = None,
        level: Union[str, LogLevel] = LogLevel.INFO,
    ):
        """
        Initialize logger.

        Args:
            component: Component identifier (e.g., "trainer", "fitter")
            log_dir: Directory for log files (default: SHARED/logs)
            level: Minimum level written to the file
        """
        self.component = component
        self.level = LogLevel(str(level).upper()) if not isinstance(level, LogLevel) else level
        self.log_file = Path(log_dir or DEFAULT_LOG_DIR) / f"{component}.log.jsonl"

        # Ensure log directory exists
        self.log_file.parent.mkdir(parents=True, exist_ok=True)

    def _write_log(self, level: LogLevel, event_type: str, details: Dict[str, Any]) -> None:
        """Write log entry to file"""
        if level.rank < self.level.rank:
            return

        log_entry = {
            "timestamp": datetime.now(timezone.utc).isoformat(),
            "component": self.component,
            "event_type": event_type,
            "level": level.value,
            "details": details,
        }

        with open(self.log_file, "a") as f:
            f.write(json.dumps(log_entry, default=str) + "\n")
            f.flush()

    def debug(self, event_type: str, **details) -> None:
        """Log DEBUG level message"""
        self._write_log(LogLevel.DEBUG, event_type, details)

    def info(self, event_type: str, **details) -> None:
        """Log INFO level message"""
        self._write_log(LogLevel.INFO, event_type, details)

    def warning(self, event_type: str, **details) -> None:
        """Log WARNING level message"""
        self._write_log(LogLevel.WARNING, event_type, details)

    def error(self, event_type: str, **details) -> None:
        """Log ERROR level message"""
        self._write_log(LogLevel.ERROR, event_type, details)

    def log_epoch(self, epoch: int, **metrics) -> None:
        """Convenience method for logging end-of-epoch training metrics"""
        self.info("EPOCH_COMPLETED", epoch=epoch, **metrics)

    def log_stage(self, stage: str, **extra) -> None:
        """Convenience method for logging pipeline stage transitions"""
        self.info("STAGE", stage=stage, **extra)


class NullLogger(JsonLogger):
    """Logger that discards everything; used when no logger is injected"""

    def __init__(self, component: str = "null"):
        self.component = component
        self.level = LogLevel.ERROR
        self.log_file = None

    def _write_log(self, level: LogLevel, event_type: str, details: Dict[str, Any]) -> None:
        return None
