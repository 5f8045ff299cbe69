"""Retry with exponential backoff for flaky commercial endpoints."""

from __future__ import annotations

import random
import time
from dataclasses import dataclass
from typing import Callable, TypeVar

T = TypeVar("T")


class RetryBudgetExceeded(RuntimeError):
    pass


@dataclass(frozen=True)
class RetryPolicy:
    attempts: int = 5
    base_delay: float = 1.0
    factor: float = 2.0
    max_delay: float = 30.0
    jitter: float = 0.25

    def delay(self, attempt: int, rng: random.Random) -> float:
        raw = min(self.base_delay * (self.factor ** attempt), self.max_delay)
        return raw * (1.0 + self.jitter * rng.random())


def call_with_retries(
    fn: Callable[[], T],
    policy: RetryPolicy = RetryPolicy(),
    retryable: Callable[[Exception], bool] = lambda exc: True,
    sleep: Callable[[float], None] = time.sleep,
) -> T:
    rng = random.Random()
    last: Exception | None = None
    for attempt in range(policy.attempts):
        try:
            return fn()
        except Exception as exc:  # noqa: BLE001 - classified by `retryable`
            if not retryable(exc):
                raise
            last = exc
            if attempt + 1 < policy.attempts:
                sleep(policy.delay(attempt, rng))
    raise RetryBudgetExceeded(f"gave up after {policy.attempts} attempts: {last}") from last
