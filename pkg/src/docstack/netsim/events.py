"""Virtual-time event loop."""

from __future__ import annotations

import heapq
import itertools
from typing import Callable


class Handle:
    __slots__ = ("when", "callback", "cancelled")

    def __init__(self, when: float, callback: Callable[[], None]):
        self.when = when
        self.callback = callback
        self.cancelled = False

    def cancel(self) -> None:
        self.cancelled = True


class EventLoop:
    """Single-threaded scheduler; ties are broken by scheduling order."""

    def __init__(self):
        self._now = 0.0
        self._queue: list[tuple[float, int, Handle]] = []
        self._seq = itertools.count()

    def now(self) -> float:
        return self._now

    def call_at(self, when: float, callback: Callable[[], None]) -> Handle:
        if when < self._now:
            when = self._now
        handle = Handle(when, callback)
        heapq.heappush(self._queue, (when, next(self._seq), handle))
        return handle

    def call_later(self, delay: float, callback: Callable[[], None]) -> Handle:
        return self.call_at(self._now + max(0.0, delay), callback)

    def run(self, until: float | None = None) -> None:
        while self._queue:
            when, _, handle = self._queue[0]
            if until is not None and when > until:
                self._now = until
                return
            heapq.heappop(self._queue)
            if handle.cancelled:
                continue
            self._now = when
            handle.callback()

    @property
    def pending(self) -> int:
        return sum(1 for _, _, h in self._queue if not h.cancelled)
