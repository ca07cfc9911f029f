"""
Structured Logging for PerfectLES

JSON-lines logging with rotation for every pipeline stage plus a coloured
console stream. Domain helpers record run events, time-step progress and
training epochs with machine-readable payloads.

Author: PerfectLES Team
Version: 1.0.0
License: Apache 2.0
"""

from __future__ import annotations

import json
import logging
import sys
import threading
from dataclasses import dataclass
from datetime import datetime, timezone
from logging.handlers import RotatingFileHandler
from pathlib import Path
from typing import Any, Dict, Optional

from colorama import Fore, Style
from colorama import init as colorama_init

colorama_init()


@dataclass
class LogConfig:
    log_level: str = "INFO"
    log_file: str = "logs/perfectles.log"
    max_log_size_mb: int = 10
    backup_log_count: int = 5
    enable_console: bool = True
    enable_json: bool = True


def _json_default(value: Any) -> Any:
    # numpy scalars and arrays end up in extras
    if hasattr(value, "tolist"):
        return value.tolist()
    return str(value)


class StructuredFormatter(logging.Formatter):
    """JSON-lines formatter for the log file."""

    def format(self, record: logging.LogRecord) -> str:
        log_entry = {
            "timestamp": datetime.now(timezone.utc).isoformat(),
            "level": record.levelname,
            "module": record.name,
            "function": record.funcName,
            "line": record.lineno,
            "message": record.getMessage(),
        }

        extra = getattr(record, "extra", None)
        if extra:
            log_entry["extra"] = extra

        if record.exc_info:
            log_entry["exception"] = self.formatException(record.exc_info)

        return json.dumps(log_entry, default=_json_default)


class ConsoleFormatter(logging.Formatter):
    """Human-readable formatter for console output."""

    COLORS = {
        "DEBUG": Fore.CYAN,
        "INFO": Fore.GREEN,
        "WARNING": Fore.YELLOW,
        "ERROR": Fore.RED,
        "CRITICAL": Fore.MAGENTA,
    }

    def format(self, record: logging.LogRecord) -> str:
        timestamp = datetime.now().strftime("%Y-%m-%d %H:%M:%S")
        color = self.COLORS.get(record.levelname, "")
        log_str = (
            f"{timestamp} {color}[{record.levelname}]{Style.RESET_ALL} "
            f"[{record.name}] {record.getMessage()}"
        )
        if record.exc_info:
            log_str += f"\n{self.formatException(record.exc_info)}"
        return log_str


class StructuredLogger:
    """Structured JSON logger, one instance per name."""

    _instances: Dict[str, "StructuredLogger"] = {}
    _lock = threading.Lock()

    def __new__(cls, name: str, *args, **kwargs):
        with cls._lock:
            if name not in cls._instances:
                cls._instances[name] = super(StructuredLogger, cls).__new__(cls)
            return cls._instances[name]

    def __init__(self, name: str, config: Optional[LogConfig] = None):
        if getattr(self, "_initialized", False) and config is None:
            return
        self.name = name
        self.config = config or LogConfig()
        self.logger = logging.getLogger(f"perfectles.{name}")
        self.logger.setLevel(getattr(logging, self.config.log_level.upper(), logging.INFO))
        self.logger.propagate = False
        self._setup_handlers()
        self._initialized = True

    def _setup_handlers(self) -> None:
        for handler in self.logger.handlers[:]:
            self.logger.removeHandler(handler)
            handler.close()

        if self.config.enable_json:
            log_path = Path(self.config.log_file)
            log_path.parent.mkdir(parents=True, exist_ok=True)
            file_handler = RotatingFileHandler(
                log_path,
                maxBytes=self.config.max_log_size_mb * 1024 * 1024,
                backupCount=self.config.backup_log_count,
                encoding="utf-8",
            )
            file_handler.setFormatter(StructuredFormatter())
            self.logger.addHandler(file_handler)

        if self.config.enable_console:
            console_handler = logging.StreamHandler(sys.stderr)
            console_handler.setFormatter(ConsoleFormatter())
            self.logger.addHandler(console_handler)

        if not self.logger.handlers:
            self.logger.addHandler(logging.NullHandler())

    def debug(self, msg: str, *args, extra: Optional[Dict[str, Any]] = None) -> None:
        self.logger.debug(msg, *args, extra={"extra": extra})

    def info(self, msg: str, *args, extra: Optional[Dict[str, Any]] = None) -> None:
        self.logger.info(msg, *args, extra={"extra": extra})

    def warning(self, msg: str, *args, extra: Optional[Dict[str, Any]] = None) -> None:
        self.logger.warning(msg, *args, extra={"extra": extra})

    def error(self, msg: str, *args, extra: Optional[Dict[str, Any]] = None, exc_info=None) -> None:
        self.logger.error(msg, *args, extra={"extra": extra}, exc_info=exc_info)

    def critical(self, msg: str, *args, extra: Optional[Dict[str, Any]] = None, exc_info=None) -> None:
        self.logger.critical(msg, *args, extra={"extra": extra}, exc_info=exc_info)

    def run_event(self, kind: str, **details: Any) -> None:
        """Log a pipeline milestone (run start/end, file written, split chosen)."""
        self.info(f"Run: {kind}", extra={"type": "run_event", "kind": kind, "details": details})

    def step_progress(self, step: int, time: float, **metrics: Any) -> None:
        """Log time-loop progress at debug level."""
        payload = {"type": "step", "step": step, "time": time, **metrics}
        self.debug(f"Step {step}: t={time:.6f}", extra=payload)

    def epoch_summary(self, epoch: int, train_cost: float, val_cost: float) -> None:
        payload = {"type": "epoch", "epoch": epoch, "train_cost": train_cost, "val_cost": val_cost}
        self.info(f"Epoch {epoch}: train={train_cost:.6e} val={val_cost:.6e}", extra=payload)


_default_config: Optional[LogConfig] = None


def configure_logging(system_settings: Any = None) -> LogConfig:
    """Apply the ``system`` config section to every existing and future logger."""
    global _default_config
    if system_settings is None:
        config = LogConfig()
    else:
        config = LogConfig(
            log_level=system_settings.log_level,
            log_file=system_settings.log_file,
            max_log_size_mb=system_settings.max_log_size_mb,
            backup_log_count=system_settings.backup_log_count,
            enable_console=system_settings.enable_console,
            enable_json=system_settings.enable_json,
        )
    _default_config = config
    for name in list(StructuredLogger._instances):
        StructuredLogger(name, LogConfig(**vars(config)))
    return config


def get_logger(name: str) -> StructuredLogger:
    """Get or create a logger; defaults to console-only until configured."""
    if name in StructuredLogger._instances:
        return StructuredLogger._instances[name]
    config = _default_config or LogConfig(log_level="WARNING", enable_json=False)
    return StructuredLogger(name, LogConfig(**vars(config)))
