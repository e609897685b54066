from __future__ import annotations

import logging
import multiprocessing
import signal
import threading
from typing import Callable
from typing import Iterable
from typing import List
from typing import Optional
from typing import TypeVar
from typing import Union

T = TypeVar("T")
R = TypeVar("R")

EventLike = Union[threading.Event, "multiprocessing.synchronize.Event"]


class SignalHandler:
    """Sets `event` on SIGINT or SIGTERM while active."""

    def __init__(self, event: EventLike):
        self.event = event

    def __enter__(self):
        self.old_sigint_handler = signal.signal(signal.SIGINT, self._handler)
        self.old_sigterm_handler = signal.signal(signal.SIGTERM, self._handler)
        return self

    def __exit__(self, *args):
        signal.signal(signal.SIGINT, self.old_sigint_handler)
        signal.signal(signal.SIGTERM, self.old_sigterm_handler)

    def _handler(self, signum, frame):
        logging.info("Received signal: %s", signal.Signals(signum).name)
        self.event.set()


def _ignore_sigint() -> None:
    # Workers leave shutdown to the parent
    signal.signal(signal.SIGINT, signal.SIG_IGN)


class EvaluationPool:
    """Runs jobs in worker processes and returns results in job order.

    With one worker everything runs in the calling process. Once
    `stop_event` is set no new results are collected: the jobs finished so
    far are returned and the workers are terminated.
    """

    def __init__(self, workers: int = 1, stop_event: Optional[EventLike] = None):
        if workers < 1:
            raise ValueError(f"workers must be >= 1, got {workers}")
        self.workers = workers
        self.stop_event = stop_event or threading.Event()

    @property
    def stopped(self) -> bool:
        return self.stop_event.is_set()

    def map(self, fn: Callable[[T], R], jobs: Iterable[T]) -> List[R]:
        jobs = list(jobs)
        if not jobs:
            return []
        if self.workers == 1 or len(jobs) == 1:
            return self._map_inline(fn, jobs)

        results: List[R] = []
        processes = min(self.workers, len(jobs))
        logging.debug("Evaluating %d jobs with %d workers", len(jobs), processes)
        pool = multiprocessing.Pool(processes, initializer=_ignore_sigint)
        try:
            for result in pool.imap(fn, jobs):
                results.append(result)
                if self.stopped:
                    logging.warning(
                        "Stopping evaluation after %d of %d jobs", len(results), len(jobs)
                    )
                    break
        finally:
            if self.stopped:
                pool.terminate()
            else:
                pool.close()
            pool.join()
        return results

    def _map_inline(self, fn: Callable[[T], R], jobs: List[T]) -> List[R]:
        results: List[R] = []
        for job in jobs:
            if self.stopped:
                logging.warning(
                    "Stopping evaluation after %d of %d jobs", len(results), len(jobs)
                )
                break
            results.append(fn(job))
        return results
