from __future__ import annotations

import time
from dataclasses import asdict
from typing import Any
from typing import Dict
from typing import Optional

from pydantic.dataclasses import dataclass


@dataclass
class JobState:
    """Outcome of one (candidate, seed) evaluation job."""

    candidate_id: str
    seed: int
    ok: bool = True
    """False if the job raised."""
    fitness: Optional[float] = None
    """Negative W2 of the trained policy, None until the job succeeds."""
    eval_return: Optional[float] = None
    error: Optional[str] = None
    """The error message if `ok` is False."""
    error_type: Optional[str] = None
    """The type of error if `ok` is False."""
    started: Optional[float] = None
    elapsed: float = 0.0

    def asdict(self) -> Dict[str, Any]:
        return asdict(self)

    def start(self) -> None:
        self.started = time.monotonic()

    def finish(self) -> None:
        if self.started is not None:
            self.elapsed = time.monotonic() - self.started

    def set_ok(self, fitness: float, eval_return: Optional[float] = None) -> None:
        self.ok = True
        self.fitness = fitness
        self.eval_return = eval_return
        self.error = None
        self.error_type = None
        self.finish()

    def set_error(self, exc: Exception) -> None:
        self.ok = False
        self.fitness = None
        self.error = str(exc)
        self.error_type = type(exc).__name__
        self.finish()


@dataclass
class RunState:
    """Progress of an evolution run, updated by the parent process only."""

    generation: int = 0
    evaluated: int = 0
    failed: int = 0
    llm_failures: int = 0
    fallbacks: int = 0
    best_fitness: Optional[float] = None
    stopped: bool = False

    def asdict(self) -> Dict[str, Any]:
        return asdict(self)

    def record(self, job: JobState) -> None:
        self.evaluated += 1
        if not job.ok:
            self.failed += 1

    def update_best(self, fitness: float) -> None:
        if self.best_fitness is None or fitness > self.best_fitness:
            self.best_fitness = fitness
