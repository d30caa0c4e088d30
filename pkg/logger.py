import logging
import sys
import time
import uuid
from typing import Dict, Optional

from config import Config

_FORMAT = '%(asctime)s - %(levelname)s - %(message)s'


def get_logger(name: str = 'relaxo') -> logging.Logger:
    logger = logging.getLogger(name)
    if not logger.handlers:
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(logging.Formatter(_FORMAT))
        logger.addHandler(handler)
        logger.propagate = False
    logger.setLevel(Config.LOG_LEVEL)
    return logger


def set_verbose(verbose: bool):
    level = logging.DEBUG if verbose else Config.LOG_LEVEL
    for name in list(logging.root.manager.loggerDict):
        if name == 'relaxo' or name.startswith('relaxo.'):
            logging.getLogger(name).setLevel(level)


class RunLogger:
    """Task-scoped log lines: start, progress and completion with durations."""

    def __init__(self, name: str = 'relaxo.run'):
        self.log = get_logger(name)
        self.task_start_times: Dict[str, float] = {}
        self.last_update: Dict[str, float] = {}
        self.update_interval = 2  # seconds between progress lines per task

    def log_task_start(self, label: str, task_id: Optional[str] = None) -> str:
        task_id = task_id or str(uuid.uuid4())[:8]
        self.task_start_times[task_id] = time.time()
        self.log.info(f"🆕 [{task_id}] {label}")
        return task_id

    def update_task_progress(self, task_id: str, status: str, done: int = 0, total: int = 0):
        now = time.time()
        if now - self.last_update.get(task_id, 0) < self.update_interval and done < total:
            return
        self.last_update[task_id] = now
        bar = ''
        if total:
            filled = int(10 * done / total)
            bar = f" [{'▰' * filled}{'▱' * (10 - filled)}] {done}/{total}"
        self.log.info(f"⚡ [{task_id}] {status}{bar}")

    def log_task_done(self, task_id: str, status: str = "✅ Completed"):
        duration = time.time() - self.task_start_times.pop(task_id, time.time())
        self.last_update.pop(task_id, None)
        self.log.info(f"{status} [{task_id}] in {self._format_duration(duration)}")

    def log_task_failed(self, task_id: str, error: Exception):
        self.log_task_done(task_id, f"❌ Failed: {error}")

    def _format_duration(self, seconds: float) -> str:
        if seconds < 60:
            return f"{seconds:.2f}s"
        minutes, seconds = divmod(int(seconds), 60)
        hours, minutes = divmod(minutes, 60)
        if hours:
            return f"{hours}h {minutes}m {seconds}s"
        return f"{minutes}m {seconds}s"
