"""An asyncio event loop driven by a virtual clock.

Protocol code written against asyncio runs unchanged; whenever the loop has
nothing ready it jumps straight to the next timer instead of sleeping.
Timers due at the same instant fire in the order they were scheduled.
"""
from __future__ import annotations

import asyncio
import heapq
import itertools
import selectors
from typing import Any


class SimulationStalled(RuntimeError):
    """Every task is blocked and no timer is pending."""


class _SeqTimerHandle(asyncio.TimerHandle):
    __slots__ = ("_seq",)

    def __init__(self, seq: int, *args: Any) -> None:
        super().__init__(*args)
        self._seq = seq

    def __lt__(self, other: "_SeqTimerHandle") -> bool:
        # hot path for the heap; avoids building tuples
        a, b = self._when, other._when
        return a < b or (a == b and self._seq < other._seq)

    def __le__(self, other: "_SeqTimerHandle") -> bool:
        return (self._when, self._seq) <= (other._when, other._seq)

    def __gt__(self, other: "_SeqTimerHandle") -> bool:
        return (self._when, self._seq) > (other._when, other._seq)

    def __ge__(self, other: "_SeqTimerHandle") -> bool:
        return (self._when, self._seq) >= (other._when, other._seq)


class _VirtualSelector(selectors.BaseSelector):
    """Never reports I/O; a positive timeout advances the virtual clock."""

    def __init__(self) -> None:
        self._map: dict[int, selectors.SelectorKey] = {}
        self.loop: VirtualTimeLoop | None = None

    @staticmethod
    def _fd(fileobj: Any) -> int:
        return fileobj if isinstance(fileobj, int) else fileobj.fileno()

    def register(self, fileobj, events, data=None):
        key = selectors.SelectorKey(fileobj, self._fd(fileobj), events, data)
        self._map[key.fd] = key
        return key

    def unregister(self, fileobj):
        return self._map.pop(self._fd(fileobj))

    def select(self, timeout=None):
        if timeout is None:
            raise SimulationStalled("no runnable task and no pending timer")
        if timeout > 0:
            self.loop._jump()
        return []

    def get_map(self):
        return self._map

    def close(self) -> None:
        self._map.clear()


class VirtualTimeLoop(asyncio.SelectorEventLoop):
    def __init__(self, start: float = 0.0) -> None:
        selector = _VirtualSelector()
        super().__init__(selector)
        selector.loop = self
        self._vtime = float(start)
        self._clock_resolution = 1e-9
        self._seq = itertools.count()
        self.timers_scheduled = 0

    def time(self) -> float:
        return self._vtime

    def _jump(self) -> None:
        if self._scheduled:
            self._vtime = max(self._vtime, self._scheduled[0]._when)

    def call_at(self, when, callback, *args, context=None):
        self._check_closed()
        timer = _SeqTimerHandle(next(self._seq), when, callback, args, self, context)
        heapq.heappush(self._scheduled, timer)
        timer._scheduled = True
        self.timers_scheduled += 1
        return timer

    def advance(self, duration: float) -> None:
        """Run every event due within the next ``duration`` virtual seconds."""
        if duration < 0:
            raise ValueError("cannot advance backwards")
        self.run_until_complete(asyncio.sleep(duration))

    def cancel_all(self) -> None:
        """Cancel every pending task and let them unwind."""
        tasks = [t for t in asyncio.all_tasks(self) if not t.done()]
        for task in tasks:
            task.cancel()
        if tasks:
            self.run_until_complete(asyncio.gather(*tasks, return_exceptions=True))
