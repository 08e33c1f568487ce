"""Simulation clock and timer scheduler.

Two clock modes share one interface: a scripted clock advances only when the
scenario runner says so (identical scenarios give identical timestamps), a
realtime clock tracks the wall clock in milliseconds since the Unix epoch.

The scheduler is a single ordered timer queue. Under a scripted clock the
owner drains it explicitly (run_until); under a realtime clock a background
thread fires timers as they come due. Ties fire in scheduling order, which
pins the event order for deterministic runs.
"""

from __future__ import annotations

import heapq
import itertools
import threading
import time
from typing import Callable


class ScriptedClock:
    mode = "scripted"

    def __init__(self, start_ms: int = 0):
        self._now = start_ms

    def now_ms(self) -> int:
        return self._now

    def set_now(self, now_ms: int) -> None:
        if now_ms < self._now:
            raise ValueError(f"scripted clock cannot go backwards ({now_ms} < {self._now})")
        self._now = now_ms


class RealtimeClock:
    mode = "realtime"

    def now_ms(self) -> int:
        return int(time.time() * 1000)


Clock = ScriptedClock | RealtimeClock


class TimerHandle:
    __slots__ = ("when", "cancelled")

    def __init__(self, when: int):
        self.when = when
        self.cancelled = False

    def cancel(self) -> None:
        self.cancelled = True


class Scheduler:
    """Ordered timer queue over either clock mode.

    Callbacks run on whichever thread drives the scheduler: the scenario
    runner's thread (scripted) or the loop thread (realtime). Thread-safe
    to schedule from anywhere.
    """

    def __init__(self, clock: Clock):
        self.clock = clock
        self._heap: list[tuple[int, int, TimerHandle, Callable, tuple]] = []
        self._counter = itertools.count()
        self._lock = threading.Lock()
        self._wakeup = threading.Condition(self._lock)
        self._thread: threading.Thread | None = None
        self._running = False

    def call_at(self, when_ms: int, fn: Callable, *args) -> TimerHandle:
        handle = TimerHandle(when_ms)
        with self._wakeup:
            heapq.heappush(self._heap, (when_ms, next(self._counter), handle, fn, args))
            self._wakeup.notify()
        return handle

    def call_later(self, delay_ms: int, fn: Callable, *args) -> TimerHandle:
        return self.call_at(self.clock.now_ms() + delay_ms, fn, *args)

    def next_due(self) -> int | None:
        with self._lock:
            while self._heap and self._heap[0][2].cancelled:
                heapq.heappop(self._heap)
            return self._heap[0][0] if self._heap else None

    def _pop_due(self, now_ms: int):
        with self._lock:
            while self._heap:
                when, _, handle, fn, args = self._heap[0]
                if handle.cancelled:
                    heapq.heappop(self._heap)
                    continue
                if when > now_ms:
                    return None
                heapq.heappop(self._heap)
                return when, fn, args
            return None

    # -- scripted driving ---------------------------------------------------

    def run_until(self, t_ms: int, idle_hook: Callable[[], bool] | None = None) -> None:
        """Advance a scripted clock to t_ms, firing every timer due on the way.

        idle_hook is called whenever no timer is due at the current instant;
        returning True means it did work that may have scheduled more timers
        at the same instant (e.g. draining sockets), so time must not advance
        yet. Time only moves once the instant is fully quiescent.
        """
        clock = self.clock
        assert isinstance(clock, ScriptedClock), "run_until drives scripted clocks only"
        while True:
            due = self._pop_due(clock.now_ms())
            if due is not None:
                when, fn, args = due
                fn(*args)
                continue
            if idle_hook is not None and idle_hook():
                continue
            nxt = self.next_due()
            if nxt is None or nxt > t_ms:
                clock.set_now(t_ms)
                return
            clock.set_now(nxt)

    # -- realtime driving ---------------------------------------------------

    def start(self) -> None:
        assert isinstance(self.clock, RealtimeClock)
        self._running = True
        self._thread = threading.Thread(target=self._loop, name="scheduler", daemon=True)
        self._thread.start()

    def stop(self) -> None:
        with self._wakeup:
            self._running = False
            self._wakeup.notify()
        if self._thread is not None:
            self._thread.join(timeout=2)
            self._thread = None

    def _loop(self) -> None:
        while True:
            with self._wakeup:
                if not self._running:
                    return
                nxt = None
                while self._heap and self._heap[0][2].cancelled:
                    heapq.heappop(self._heap)
                if self._heap:
                    nxt = self._heap[0][0]
                now = self.clock.now_ms()
                if nxt is None:
                    self._wakeup.wait(timeout=0.5)
                    continue
                if nxt > now:
                    self._wakeup.wait(timeout=min((nxt - now) / 1000.0, 0.5))
                    continue
            due = self._pop_due(self.clock.now_ms())
            if due is not None:
                _, fn, args = due
                try:
                    fn(*args)
                except Exception:  # timer callbacks must not kill the loop
                    import logging
                    logging.getLogger(__name__).exception("timer callback failed")
