from __future__ import annotations

import time
from collections import deque
from dataclasses import dataclass
from dataclasses import field
from typing import Callable
from typing import Deque
from typing import Optional


@dataclass(order=True)
class Error:
    timestamp: float
    exception: Optional[Exception] = field(default=None, compare=False)


class RollingErrorCounter:
    """Counts errors in the last `duration` seconds.

    The tolerance is exceeded once more than `tolerance` errors are on record.
    `clock` is injectable for tests.
    """

    def __init__(
        self,
        duration: float,
        tolerance: int,
        clock: Callable[[], float] = time.monotonic,
    ) -> None:
        if duration < 0:
            raise ValueError("duration must be a positive number")
        if tolerance < 0:
            raise ValueError("tolerance must be a positive integer")
        self.duration = duration
        self.tolerance = tolerance
        self.clock = clock
        self.errors: Deque[Error] = deque()

    @property
    def last_error(self) -> Optional[Error]:
        return self.errors[-1] if self.errors else None

    def add(self, exception: Optional[Exception] = None) -> None:
        self.errors.append(Error(timestamp=self.clock(), exception=exception))

    def reset(self) -> None:
        self.errors.clear()

    def count(self) -> int:
        """Number of errors in the last `duration` seconds."""
        cutoff = self.clock() - self.duration
        while self.errors and self.errors[0].timestamp < cutoff:
            self.errors.popleft()
        return len(self.errors)

    def tolerance_exceeded(self) -> bool:
        return self.count() > self.tolerance


class Disabler:
    """Disables an endpoint for `disable_duration` seconds once its error
    counter exceeds tolerance."""

    def __init__(
        self,
        counter: RollingErrorCounter,
        disable_duration: float,
    ) -> None:
        self.counter = counter
        self.disable_duration = disable_duration
        self.disabled_until: Optional[float] = None

    @property
    def disabled(self) -> bool:
        if self.disabled_until is None:
            return False
        if self.counter.clock() >= self.disabled_until:
            self.disabled_until = None
            self.counter.reset()
            return False
        return True

    def record_error(self, exception: Optional[Exception] = None) -> bool:
        """Register a failure. Returns True if this disabled the endpoint."""
        self.counter.add(exception)
        if self.counter.tolerance_exceeded() and self.disable_duration > 0:
            self.disabled_until = self.counter.clock() + self.disable_duration
            return True
        return False
