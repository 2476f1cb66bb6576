"""Injected time source; the simulated clock makes timing tests exact."""

from __future__ import annotations

import time


class Clock:
    """Millisecond clock interface."""

    is_virtual = False

    def now_ms(self) -> int:
        raise NotImplementedError

    def sleep_ms(self, ms: float) -> None:
        raise NotImplementedError


class SystemClock(Clock):
    """Wall clock, ms since the Unix epoch, UTC."""

    def now_ms(self) -> int:
        return int(time.time() * 1000)

    def sleep_ms(self, ms: float) -> None:
        if ms > 0:
            time.sleep(ms / 1000.0)


class SimulatedClock(Clock):
    """Manually advanced clock; time only moves when told to.

    Intended for single-threaded deterministic runs; sleeping advances time
    immediately.
    """

    is_virtual = True

    def __init__(self, start_ms: int = 0):
        self._now = int(start_ms)

    def now_ms(self) -> int:
        return self._now

    def sleep_ms(self, ms: float) -> None:
        if ms > 0:
            self._now += int(ms)

    def advance(self, ms: float) -> None:
        if ms < 0:
            raise ValueError("cannot move time backwards")
        self._now += int(ms)

    def advance_to(self, t_ms: int) -> None:
        if t_ms < self._now:
            raise ValueError(f"cannot move time backwards: {t_ms} < {self._now}")
        self._now = int(t_ms)
