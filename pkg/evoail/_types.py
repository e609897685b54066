"""Custom types used by evoail.

Leading underscore in module name to avoid name collision with built-in module `types`.
"""

from __future__ import annotations

from typing import List
from typing import Protocol
from typing import Tuple
from typing import TypedDict
from typing import runtime_checkable

import numpy as np


@runtime_checkable
class Policy(Protocol):
    """Anything that picks discrete actions from observations."""

    n_actions: int

    def act(self, obs: np.ndarray, rng: np.random.Generator) -> Tuple[int, float]:
        """Sample an action for a single observation. Returns (action, log-prob)."""
        ...


@runtime_checkable
class ChatClient(Protocol):
    """Chat completion endpoint."""

    def complete(self, messages: List[Message], temperature: float) -> str:
        """Send a conversation, return the assistant message content."""
        ...


class Message(TypedDict):
    role: str
    content: str


class GenerationSummary(TypedDict):
    """Best candidate of one generation, as written to the ledger summary."""

    generation: int
    best_id: str
    best_fitness: float
    best_dsl: str
    n_evaluated: int
