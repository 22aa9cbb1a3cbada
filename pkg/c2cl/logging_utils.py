"""
Logging for batch runs
批处理日志

Colored console output, an optional rotating log file, per-item stage
failure lines and per-stage wall-clock accounting for timing reports.
"""
import functools
import logging
import sys
import time
from logging.handlers import RotatingFileHandler
from pathlib import Path
from typing import Callable, Dict, Optional

DEFAULT_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"

# third-party loggers that are noisy at INFO
QUIET_LOGGERS = ("sqlalchemy.engine", "PIL", "matplotlib")


class Colors:
    RESET = '\033[0m'
    RED = '\033[91m'
    GREEN = '\033[92m'
    YELLOW = '\033[93m'
    MAGENTA = '\033[95m'
    CYAN = '\033[96m'
    GRAY = '\033[90m'


class ColoredFormatter(logging.Formatter):
    """Colors the level name and, when present, the ``stage`` extra"""

    LEVEL_COLORS = {
        logging.DEBUG: Colors.GRAY,
        logging.INFO: Colors.GREEN,
        logging.WARNING: Colors.YELLOW,
        logging.ERROR: Colors.RED,
        logging.CRITICAL: Colors.MAGENTA,
    }

    def format(self, record):
        # a copy, so the file handler sees the plain record
        record = logging.makeLogRecord(record.__dict__)
        color = self.LEVEL_COLORS.get(record.levelno, Colors.RESET)
        record.levelname = f"{color}{record.levelname}{Colors.RESET}"
        if hasattr(record, 'stage'):
            record.msg = f"{Colors.CYAN}[{record.stage}]{Colors.RESET} {record.msg}"
        return super().format(record)


# ==================== Stage timing ====================

class StageTimer:
    """
    Wall-clock accounting per pipeline stage.
    阶段耗时统计

    Item-level timers are merged into the batch timer, so ``as_dict`` gives
    total seconds and call counts per stage for timing.json.
    """

    def __init__(self, logger: Optional[logging.Logger] = None, source: str = "pipeline"):
        self.logger = logger or logging.getLogger(f"timing.{source}")
        self.source = source
        self.totals: Dict[str, float] = {}
        self.counts: Dict[str, int] = {}

    def add(self, stage: str, seconds: float, calls: int = 1):
        self.totals[stage] = self.totals.get(stage, 0.0) + seconds
        self.counts[stage] = self.counts.get(stage, 0) + calls

    def stage(self, stage: str) -> "_TimedStage":
        return _TimedStage(self, stage)

    def merge(self, other: "StageTimer"):
        for stage, seconds in other.totals.items():
            self.add(stage, seconds, other.counts.get(stage, 0))

    def log_summary(self):
        for stage, seconds in sorted(self.totals.items(), key=lambda kv: -kv[1]):
            calls = self.counts.get(stage, 0)
            per_call = seconds / calls * 1000 if calls else 0.0
            self.logger.info(
                f"⏱ {stage} | calls={calls} | Time: {seconds:.3f}s ({per_call:.1f}ms/call)",
                extra={'stage': self.source}
            )

    def as_dict(self) -> Dict[str, Dict[str, float]]:
        return {
            stage: {"seconds": round(seconds, 6), "calls": self.counts.get(stage, 0)}
            for stage, seconds in self.totals.items()
        }


class _TimedStage:
    def __init__(self, timer: StageTimer, stage: str):
        self.timer = timer
        self.stage = stage
        self.start = 0.0

    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        self.timer.add(self.stage, time.perf_counter() - self.start)
        return False


# ==================== Setup ====================

def setup_logging(
    level: str = "INFO",
    log_format: Optional[str] = None,
    log_file: Optional[str] = None,
    max_file_size: int = 10,
    backup_count: int = 5
) -> logging.Logger:
    """
    Configure the root logger: colored stderr output plus a rotating file
    when ``log_file`` is non-empty (``max_file_size`` in MB).
    配置根日志器
    """
    log_format = log_format or DEFAULT_FORMAT
    numeric_level = getattr(logging, str(level).upper(), logging.INFO)

    root_logger = logging.getLogger()
    root_logger.setLevel(numeric_level)
    root_logger.handlers.clear()

    console_handler = logging.StreamHandler(sys.stderr)
    console_handler.setLevel(numeric_level)
    console_handler.setFormatter(ColoredFormatter(log_format))
    root_logger.addHandler(console_handler)

    if log_file:
        Path(log_file).parent.mkdir(parents=True, exist_ok=True)
        file_handler = RotatingFileHandler(
            log_file,
            maxBytes=max_file_size * 1024 * 1024,
            backupCount=backup_count,
            encoding='utf-8'
        )
        file_handler.setLevel(numeric_level)
        file_handler.setFormatter(logging.Formatter(log_format))
        root_logger.addHandler(file_handler)

    for name in QUIET_LOGGERS:
        logging.getLogger(name).setLevel(logging.WARNING)
    return root_logger


def log_function_call(logger: Optional[logging.Logger] = None) -> Callable:
    """Trace entry, exit and duration of a batch operation at DEBUG; failures at ERROR"""
    def decorator(func: Callable) -> Callable:
        log = logger or logging.getLogger(func.__module__)
        name = func.__qualname__

        @functools.wraps(func)
        def wrapper(*args, **kwargs):
            log.debug(f"→ {name}")
            start = time.perf_counter()
            try:
                result = func(*args, **kwargs)
            except Exception as e:
                log.error(f"✗ {name} | Time: {(time.perf_counter() - start) * 1000:.2f}ms | "
                          f"{type(e).__name__}: {e}")
                raise
            log.debug(f"← {name} | Time: {(time.perf_counter() - start) * 1000:.2f}ms")
            return result

        return wrapper

    return decorator


class LogContext:
    """Logs one ``✗`` line when the block raises; silent otherwise. Never suppresses."""

    def __init__(self, logger: logging.Logger, operation: str, **context):
        self.logger = logger
        self.operation = operation
        self.context = context
        self.start = 0.0

    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        if exc_type is not None:
            duration = (time.perf_counter() - self.start) * 1000
            context_str = " | ".join(f"{k}={v}" for k, v in self.context.items())
            self.logger.warning(
                f"✗ {self.operation} | {context_str} | Time: {duration:.2f}ms | "
                f"Error: {exc_type.__name__}: {exc_val}",
                extra={'stage': self.operation}
            )
        return False
