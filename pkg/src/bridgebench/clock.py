"""Event loops: a virtual-time asyncio loop and the run clock.

``VirtualTimeLoop`` is a SelectorEventLoop whose ``time()`` only advances
when every task is blocked on a timer.  Emulated link delays, ack timeouts
and pacing then cost no wall time, and a run is a deterministic function of
its inputs.  Real sockets still work on it (they are polled with a zero
timeout before virtual time jumps), but the TCP path is normally driven by
a plain real-time loop.
"""

from __future__ import annotations

import asyncio
import selectors
from typing import Awaitable, Callable, TypeVar

T = TypeVar("T")


class VirtualClockDeadlock(RuntimeError):
    """Every task is waiting and no timer is armed."""


class _VirtualSelector(selectors.BaseSelector):
    def __init__(self, loop: VirtualTimeLoop):
        self._real = selectors.DefaultSelector()
        self._loop = loop

    def register(self, fileobj, events, data=None):
        return self._real.register(fileobj, events, data)

    def unregister(self, fileobj):
        return self._real.unregister(fileobj)

    def modify(self, fileobj, events, data=None):
        return self._real.modify(fileobj, events, data)

    def get_map(self):
        return self._real.get_map()

    def close(self):
        self._real.close()

    def select(self, timeout=None):
        ready = self._real.select(0)
        if ready:
            return ready
        if timeout is None:
            # only the self-pipe (or real sockets) could wake us now
            if len(self._real.get_map()) > 1:
                return self._real.select(None)
            raise VirtualClockDeadlock("no runnable task and no pending timer")
        if timeout > 0:
            self._loop._now += timeout
        return []


class VirtualTimeLoop(asyncio.SelectorEventLoop):
    def __init__(self):
        self._now = 0.0
        super().__init__(_VirtualSelector(self))
        self._clock_resolution = 1e-9

    def time(self) -> float:
        return self._now


def run_virtual(main: Callable[[], Awaitable[T]]) -> T:
    loop = VirtualTimeLoop()
    try:
        asyncio.set_event_loop(loop)
        return loop.run_until_complete(main())
    finally:
        _shutdown(loop)


def run_realtime(main: Callable[[], Awaitable[T]]) -> T:
    loop = asyncio.new_event_loop()
    try:
        asyncio.set_event_loop(loop)
        return loop.run_until_complete(main())
    finally:
        _shutdown(loop)


def _shutdown(loop: asyncio.AbstractEventLoop) -> None:
    try:
        pending = [t for t in asyncio.all_tasks(loop) if not t.done()]
        for task in pending:
            task.cancel()
        if pending:
            loop.run_until_complete(asyncio.gather(*pending, return_exceptions=True))
        loop.run_until_complete(loop.shutdown_asyncgens())
    finally:
        asyncio.set_event_loop(None)
        loop.close()


class RunClock:
    """Microsecond timestamps relative to the start of a run.

    One instance is shared by every component in a run, so stamps taken by
    the gateway and the subscriber are directly comparable.
    """

    def __init__(self, loop: asyncio.AbstractEventLoop | None = None):
        self._loop = loop or asyncio.get_running_loop()
        self._origin = self._loop.time()

    def now(self) -> float:
        return self._loop.time() - self._origin

    def now_us(self) -> int:
        return int(round((self._loop.time() - self._origin) * 1e6))
