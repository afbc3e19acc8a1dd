"""Real and simulated millisecond clocks.

All timestamps in the package come from a :class:`Clock`.  In simulated mode
time only moves when someone calls :meth:`Clock.spend` (workload units,
store latency), so every run is reproducible.

An activation deadline is installed with :meth:`Clock.guard`; any ``spend``
that would cross it stops exactly at the deadline and raises
:class:`ActivationKilled`.
"""

from __future__ import annotations

import contextlib
import heapq
import itertools
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional


class ActivationKilled(BaseException):
    """The platform terminated the activation (deadline reached or killed).

    Derives from BaseException so generic ``except Exception`` blocks in
    action code cannot swallow a termination.
    """


@dataclass
class _Guard:
    deadline_ms: Optional[int]
    kill: threading.Event = field(default_factory=threading.Event)


class TimerHandle:
    def __init__(self) -> None:
        self.cancelled = False
        self.fired = False
        self._inner: Optional[threading.Timer] = None

    def cancel(self) -> None:
        self.cancelled = True
        if self._inner is not None:
            self._inner.cancel()


class Clock:
    mode = "abstract"

    def __init__(self) -> None:
        self._local = threading.local()

    def now_ms(self) -> int:
        raise NotImplementedError

    def spend(self, ms: int) -> None:
        raise NotImplementedError

    def call_at(self, at_ms: int, fn: Callable[[], None]) -> TimerHandle:
        raise NotImplementedError

    def poll(self) -> None:
        """Fire due timers (simulated mode only)."""

    def _guards(self) -> list[_Guard]:
        stack = getattr(self._local, "guards", None)
        if stack is None:
            stack = self._local.guards = []
        return stack

    def current_guard(self) -> Optional[_Guard]:
        stack = self._guards()
        return stack[-1] if stack else None

    @contextlib.contextmanager
    def guard(self, deadline_ms: Optional[int], kill: Optional[threading.Event] = None) -> Iterator[_Guard]:
        g = _Guard(deadline_ms, kill or threading.Event())
        stack = self._guards()
        stack.append(g)
        try:
            yield g
        finally:
            stack.pop()

    def check(self) -> None:
        g = self.current_guard()
        if g is None:
            return
        if g.kill.is_set() or (g.deadline_ms is not None and self.now_ms() > g.deadline_ms):
            raise ActivationKilled("activation terminated")


class SimulatedClock(Clock):
    mode = "simulated"

    def __init__(self, start_ms: int = 0) -> None:
        super().__init__()
        if start_ms < 0:
            raise ValueError("start_ms must be non-negative")
        self._now = start_ms
        self._lock = threading.RLock()
        self._timers: list[tuple[int, int, TimerHandle, Callable[[], None]]] = []
        self._tiebreak = itertools.count()

    def now_ms(self) -> int:
        return self._now

    def advance_to(self, at_ms: int) -> None:
        with self._lock:
            if at_ms > self._now:
                self._now = at_ms

    def spend(self, ms: int) -> None:
        if ms < 0:
            raise ValueError("cannot spend negative time")
        g = self.current_guard()
        with self._lock:
            if g is not None and g.kill.is_set():
                raise ActivationKilled("activation terminated")
            if g is not None and g.deadline_ms is not None and self._now + ms > g.deadline_ms:
                self._now = max(self._now, g.deadline_ms)
                raise ActivationKilled("deadline reached")
            self._now += ms

    def call_at(self, at_ms: int, fn: Callable[[], None]) -> TimerHandle:
        handle = TimerHandle()
        with self._lock:
            heapq.heappush(self._timers, (at_ms, next(self._tiebreak), handle, fn))
        return handle

    def poll(self) -> None:
        while True:
            with self._lock:
                if not self._timers or self._timers[0][0] > self._now:
                    return
                _, _, handle, fn = heapq.heappop(self._timers)
            if not handle.cancelled:
                handle.fired = True
                fn()


class RealClock(Clock):
    """Wall clock in epoch milliseconds, forced non-decreasing."""

    mode = "real"

    def __init__(self) -> None:
        super().__init__()
        self._last = 0
        self._lock = threading.Lock()

    def now_ms(self) -> int:
        t = time.time_ns() // 1_000_000
        with self._lock:
            if t < self._last:
                t = self._last
            self._last = t
        return t

    def spend(self, ms: int) -> None:
        if ms < 0:
            raise ValueError("cannot spend negative time")
        g = self.current_guard()
        if g is None:
            if ms:
                time.sleep(ms / 1000)
            return
        end = self.now_ms() + ms
        killed_at_deadline = g.deadline_ms is not None and end > g.deadline_ms
        if killed_at_deadline:
            end = g.deadline_ms
        remaining = end - self.now_ms()
        if remaining > 0 and g.kill.wait(remaining / 1000):
            raise ActivationKilled("activation terminated")
        if g.kill.is_set() or killed_at_deadline:
            raise ActivationKilled("deadline reached")

    def call_at(self, at_ms: int, fn: Callable[[], None]) -> TimerHandle:
        handle = TimerHandle()

        def fire() -> None:
            if not handle.cancelled:
                handle.fired = True
                fn()

        delay = max(0, at_ms - self.now_ms()) / 1000
        timer = threading.Timer(delay, fire)
        timer.daemon = True
        handle._inner = timer
        timer.start()
        return handle


def make_clock(mode: str) -> Clock:
    if mode == "simulated":
        return SimulatedClock()
    if mode == "real":
        return RealClock()
    raise ValueError(f"unknown clock mode {mode!r}")
