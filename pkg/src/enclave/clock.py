"""Injected clocks.

Every service in the enclave reads time from a clock object passed in at
construction, never from the host. Tests drive a :class:`LogicalClock`
deterministically; a real deployment may substitute :class:`SystemClock`.
"""

from __future__ import annotations

import threading
import time


class LogicalClock:
    """Monotone logical clock measured in seconds. Thread-safe."""

    def __init__(self, start: float = 0.0):
        self._now = float(start)
        self._lock = threading.Lock()

    def now(self) -> float:
        with self._lock:
            return self._now

    def advance(self, seconds: float) -> float:
        """Move time forward by `seconds` (must be >= 0). Returns the new time."""
        if seconds < 0:
            raise ValueError("clock cannot move backwards")
        with self._lock:
            self._now += seconds
            return self._now

    def set(self, t: float) -> float:
        """Jump to absolute time `t` (must not be in the past)."""
        with self._lock:
            if t < self._now:
                raise ValueError("clock cannot move backwards")
            self._now = float(t)
            return self._now


class SystemClock:
    """Wall clock with the same read interface as LogicalClock."""

    def now(self) -> float:
        return time.time()
