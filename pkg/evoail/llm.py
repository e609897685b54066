"""Chat-completion clients and the crossover prompt.

`HTTPChatClient` talks to any OpenAI-compatible ``/chat/completions``
endpoint with plain `requests`. `MockChatClient` replays canned responses so
the search can run offline and in tests.
"""

from __future__ import annotations

import itertools
import logging
import os
import re
import threading
import time
from pathlib import Path
from typing import Iterator
from typing import List
from typing import Optional
from typing import Sequence
from typing import Tuple
from typing import Union

import requests
from tenacity import Retrying
from tenacity import before_sleep_log
from tenacity import retry_if_exception
from tenacity import stop_after_attempt
from tenacity import wait_exponential

from ._types import ChatClient
from ._types import Message
from .errcount import Disabler
from .errcount import RollingErrorCounter
from .exceptions import LLMEndpointError
from .models import LLMSettings
from .ra import UNARY_OPS
from .utils import read_jsonl

RETRY_STATUS = frozenset({429, 500, 502, 503, 504})

_FENCE = re.compile(r"```[^\n`]*\n(.*?)```", re.DOTALL)
_ASSIGNMENT = re.compile(r"^\s*[A-Za-z_]\w*\s*=(?!=)")


def _is_retryable(exc: BaseException) -> bool:
    if isinstance(exc, (requests.exceptions.ConnectionError, requests.exceptions.Timeout)):
        return True
    if isinstance(exc, requests.exceptions.HTTPError) and exc.response is not None:
        return exc.response.status_code in RETRY_STATUS
    return False


class HTTPChatClient:
    """Client for an OpenAI-compatible chat completion endpoint.

    Transport errors, timeouts and HTTP 429/5xx are retried with exponential
    backoff. Requests that still fail count against a rolling error budget;
    once it is exceeded the client fails fast with `LLMEndpointError` for
    `disable_duration` seconds.
    """

    def __init__(
        self,
        settings: LLMSettings,
        session: Optional[requests.Session] = None,
    ) -> None:
        self.settings = settings
        self.url = settings.base_url.rstrip("/") + "/chat/completions"
        self.session = session or requests.Session()
        api_key = os.environ.get(settings.api_key_env)
        if api_key:
            self.session.headers["Authorization"] = f"Bearer {api_key}"
        else:
            logging.debug(
                "No API key in $%s, sending unauthenticated requests to %s",
                settings.api_key_env,
                self.url,
            )
        self.disabler = Disabler(
            RollingErrorCounter(settings.error_duration, settings.error_tolerance),
            settings.disable_duration,
        )
        self._semaphore = threading.BoundedSemaphore(settings.max_concurrency)
        self._interval_lock = threading.Lock()
        self._last_request = 0.0

    def complete(self, messages: List[Message], temperature: Optional[float] = None) -> str:
        if self.disabler.disabled:
            raise LLMEndpointError(
                f"Endpoint {self.url} is disabled after repeated errors"
            )
        payload = {
            "model": self.settings.model,
            "messages": list(messages),
            "temperature": self.settings.temperature if temperature is None else temperature,
        }
        retrying = Retrying(
            stop=stop_after_attempt(self.settings.retries + 1),
            wait=wait_exponential(multiplier=0.5, max=10),
            retry=retry_if_exception(_is_retryable),
            before_sleep=before_sleep_log(logging.getLogger(), logging.WARNING),
            reraise=True,
        )
        try:
            data = retrying(self._post, payload)
            return _message_content(data)
        except (requests.exceptions.RequestException, LLMEndpointError) as e:
            if self.disabler.record_error(e):
                logging.error(
                    "Disabling endpoint %s for %d seconds: more than %d errors in %d seconds",
                    self.url,
                    self.settings.disable_duration,
                    self.settings.error_tolerance,
                    self.settings.error_duration,
                )
            else:
                logging.warning("Chat request to %s failed: %s", self.url, e)
            if isinstance(e, LLMEndpointError):
                raise
            raise LLMEndpointError(f"Chat request to {self.url} failed: {e}") from e

    def _throttle(self) -> None:
        if self.settings.min_interval <= 0:
            return
        with self._interval_lock:
            wait = self._last_request + self.settings.min_interval - time.monotonic()
            if wait > 0:
                time.sleep(wait)
            self._last_request = time.monotonic()

    def _post(self, payload: dict) -> dict:
        with self._semaphore:
            self._throttle()
            resp = self.session.post(self.url, json=payload, timeout=self.settings.timeout)
            resp.raise_for_status()
            try:
                return resp.json()
            except ValueError as e:
                raise LLMEndpointError(f"Response from {self.url} is not JSON") from e


def _message_content(data: dict) -> str:
    try:
        content = data["choices"][0]["message"]["content"]
    except (KeyError, IndexError, TypeError) as e:
        raise LLMEndpointError(f"Malformed chat completion response: {e!r}") from e
    if not isinstance(content, str):
        raise LLMEndpointError("Chat completion content is not a string")
    return content


class MockChatClient:
    """Replays `responses` in order, starting over when they run out."""

    def __init__(self, responses: Sequence[str]) -> None:
        if not responses:
            raise ValueError("MockChatClient needs at least one response")
        self.responses = list(responses)
        self._cycle: Iterator[str] = itertools.cycle(self.responses)
        self._lock = threading.Lock()
        self.calls: List[List[Message]] = []

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> MockChatClient:
        responses = []
        for lineno, record in enumerate(read_jsonl(path), start=1):
            if not isinstance(record, dict) or not isinstance(record.get("response"), str):
                raise ValueError(f"{path}: record {lineno} has no string 'response' field")
            responses.append(record["response"])
        return cls(responses)

    def complete(self, messages: List[Message], temperature: Optional[float] = None) -> str:
        with self._lock:
            self.calls.append(list(messages))
            return next(self._cycle)


def make_client(settings: LLMSettings) -> ChatClient:
    if settings.mock_responses is not None:
        logging.info("Replaying chat responses from %s", settings.mock_responses)
        return MockChatClient.from_file(settings.mock_responses)
    return HTTPChatClient(settings)


def extract_code_block(text: str) -> Optional[str]:
    """The expression in the first fenced code block, or None.

    Comments and a leading ``name =`` are dropped, lines are joined.
    """
    match = _FENCE.search(text)
    if match is None:
        return None
    lines = []
    for line in match.group(1).splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            lines.append(line)
    if not lines:
        return None
    code = " ".join(lines)
    code = _ASSIGNMENT.sub("", code, count=1).strip()
    return code or None


SYSTEM_PROMPT = (
    "You are a research assistant working on adversarial imitation learning. "
    "You design reward functions that make training more stable and produce "
    "better final policies."
)

_BACKGROUND = """\
Setting:
A policy is trained to imitate expert state-action pairs. Each iteration
1. collects state-action pairs with the current policy,
2. trains a discriminator to tell expert pairs from policy pairs with binary
   cross-entropy, so that its logit l approximates log(rho_expert / rho_policy),
3. gives every policy pair the reward r = f(l),
4. updates the policy with reinforcement learning on those rewards.

Known choices of f:
- GAIL: softplus(x), near zero for negative logits and linear for positive ones.
- AIRL: x, linear everywhere.
- FAIRL: -x * exp(x), rises from 0 to 1/e at x = -1 and then falls steeply.
- LOGD: -softplus(-x), linear for negative logits and near zero for positive ones.
"""

_TASK = """\
Below are two reward functions f1 and f2 with their scores (higher is better).
Compare their shapes: monotonicity, bounds, smoothness, and what signal they
give for logits near zero, strongly positive and strongly negative. Relate
these properties to the scores, then propose one new function f3 that you
expect to score higher. It must differ from GAIL, AIRL, FAIRL and LOGD.
Mix novel forms with variations of the parents.

Write f3 as a single expression in this language:
- the logit is the variable x
- numbers, + - * /, unary minus, parentheses
- functions: {functions}
- min(a, b), max(a, b)
- branch(t, a, b): a where x <= t, otherwise b (t is a number)

Answer with the expression alone inside one fenced code block, for example
```
0.5 * sigmoid(x) * (tanh(x) + 1)
```
"""


def render_prompt(parents: Sequence[Tuple[str, float]]) -> List[Message]:
    """Crossover messages for parents given as (expression, score) pairs."""
    functions = ", ".join(f"{op}(a)" for op in UNARY_OPS if op != "neg")
    parts = [_BACKGROUND, _TASK.format(functions=functions)]
    for i, (dsl, score) in enumerate(parents, start=1):
        parts.append(f"Function {i}:\n```\n{dsl}\n```\nScore: {score:.6g}\n")
    return [
        Message(role="system", content=SYSTEM_PROMPT),
        Message(role="user", content="\n".join(parts)),
    ]
