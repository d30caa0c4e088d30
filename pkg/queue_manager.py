from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, List, Optional, Sequence
import asyncio
import uuid

import psutil
from setproctitle import setproctitle

from config import Config
from logger import RunLogger


@dataclass
class WorkItem:
    func: Callable
    args: tuple
    label: str = ""
    task_id: str = field(default_factory=lambda: str(uuid.uuid4())[:8])
    status: str = "queued"
    result: Any = None


def _run_item(func: Callable, args: tuple, title: str):
    setproctitle(title)
    return func(*args)


class WorkQueue:
    """Runs independent items inline or on a process pool; results keep submission order."""

    def __init__(self, workers: Optional[int] = None, label: str = "relaxo"):
        self.workers = max(1, int(workers or Config.WORKERS))
        self.label = label
        self.items: List[WorkItem] = []
        self.logger = RunLogger('relaxo.queue')

    def add_item(self, func: Callable, *args, label: str = "") -> str:
        item = WorkItem(func, args, label or f"{self.label} #{len(self.items) + 1}")
        self.items.append(item)
        return item.task_id

    @property
    def is_empty(self) -> bool:
        return not self.items

    def _check_memory(self):
        used = psutil.virtual_memory().percent
        if used > Config.MAX_MEMORY_PERCENT:
            self.logger.log.warning(f"⚠️ Memory at {used:.0f}% (limit {Config.MAX_MEMORY_PERCENT}%)")

    def run(self) -> List[Any]:
        items, self.items = self.items, []
        if not items:
            return []
        run_id = self.logger.log_task_start(f"{self.label}: {len(items)} items on {self.workers} worker(s)")
        try:
            if self.workers == 1 or len(items) == 1:
                for done, item in enumerate(items, start=1):
                    item.status = "running"
                    item.result = item.func(*item.args)
                    item.status = "done"
                    self.logger.update_task_progress(run_id, self.label, done, len(items))
            else:
                asyncio.run(self._process_queue(items, run_id))
        except Exception as e:
            self.logger.log_task_failed(run_id, e)
            raise
        self.logger.log_task_done(run_id)
        return [item.result for item in items]

    async def _process_queue(self, items: Sequence[WorkItem], run_id: str):
        loop = asyncio.get_running_loop()
        self._check_memory()
        done = 0
        with ProcessPoolExecutor(max_workers=min(self.workers, len(items))) as pool:
            futures = []
            for item in items:
                item.status = "running"
                title = f"relaxo: {item.label} [{item.task_id}]"
                futures.append(loop.run_in_executor(pool, _run_item, item.func, item.args, title))
            for item, future in zip(items, futures):
                item.result = await future
                item.status = "done"
                done += 1
                self.logger.update_task_progress(run_id, self.label, done, len(items))
                self._check_memory()

    def map(self, func: Callable, arg_list: Sequence[tuple]) -> List[Any]:
        for args in arg_list:
            self.add_item(func, *args)
        return self.run()
