"""Admission gate bounding concurrent in-flight upstream requests.

The gate is an explicit counter of active requests plus a FIFO queue of
parked waiters.  A waiter is admitted when ``active < floor(max_concurrency)``.
Slots are handed directly to the oldest waiter on release so a newly arriving
request can never jump the queue.
"""

from __future__ import annotations

import asyncio
import logging
import math
from collections import deque

log = logging.getLogger(__name__)


class GateClosed(RuntimeError):
    """Raised when acquiring from a gate that is shutting down."""


class DoubleRelease(RuntimeError):
    """Raised when a slot guard is released more than once."""


class SlotGuard:
    """One admitted slot.  Release exactly once, from any task."""

    __slots__ = ("_gate", "_released")

    def __init__(self, gate: "AdmissionGate"):
        self._gate = gate
        self._released = False

    @property
    def released(self) -> bool:
        return self._released

    def release(self) -> None:
        if self._released:
            raise DoubleRelease("admission slot released twice")
        self._released = True
        self._gate._release_one()

    async def __aenter__(self) -> "SlotGuard":
        return self

    async def __aexit__(self, *exc) -> None:
        if not self._released:
            self.release()


class AdmissionGate:
    """Dynamically resizable concurrency gate.

    Args:
        max_concurrency: Limit on in-flight requests.  Fractional values are
            accepted (the AIMD controller produces them); the effective
            integer limit is ``floor(max_concurrency)``.
        enabled: When False every acquire is admitted immediately.  Active
            requests are still counted for metrics.
    """

    def __init__(self, max_concurrency: float = 5.0, *, enabled: bool = True):
        self.enabled = enabled
        self.active = 0
        self.high_water = 0
        self.clamp_warnings = 0
        self._max = self._clamp(max_concurrency)
        self._waiters: deque[asyncio.Future] = deque()
        self._closed = False

    @property
    def max_concurrency(self) -> float:
        return self._max

    @property
    def limit(self) -> int:
        return math.floor(self._max)

    @property
    def waiters(self) -> int:
        return sum(1 for w in self._waiters if not w.done())

    @property
    def closed(self) -> bool:
        return self._closed

    def _clamp(self, value: float) -> float:
        if value < 1:
            self.clamp_warnings += 1
            log.warning("max_concurrency %.3f below 1, clamped", value)
            return 1.0
        return float(value)

    def _admit(self) -> SlotGuard:
        self.active += 1
        if self.active > self.high_water:
            self.high_water = self.active
        return SlotGuard(self)

    def _has_room(self) -> bool:
        return not self.enabled or self.active < self.limit

    async def acquire(self) -> SlotGuard:
        if self._closed:
            raise GateClosed("admission gate is shut down")
        if not self._waiters and self._has_room():
            return self._admit()

        fut = asyncio.get_running_loop().create_future()
        self._waiters.append(fut)
        try:
            await fut
        except asyncio.CancelledError:
            if fut.done() and not fut.cancelled() and fut.exception() is None:
                # slot was handed over just before cancellation
                self.active -= 1
                self._wake()
            else:
                try:
                    self._waiters.remove(fut)
                except ValueError:
                    pass
            raise
        # active was incremented on our behalf by _wake
        return SlotGuard(self)

    def try_acquire(self) -> SlotGuard | None:
        """Non-blocking acquire; None when the caller would have to wait."""
        if self._closed or self._waiters or not self._has_room():
            return None
        return self._admit()

    def _wake(self) -> None:
        while self._waiters and self._has_room():
            fut = self._waiters.popleft()
            if fut.done():
                continue
            self.active += 1
            if self.active > self.high_water:
                self.high_water = self.active
            fut.set_result(None)

    def _release_one(self) -> None:
        if self.active <= 0:
            raise DoubleRelease("release without a matching acquire")
        self.active -= 1
        self._wake()

    def release(self, guard: SlotGuard) -> None:
        guard.release()

    def set_max_concurrency(self, new_limit: float) -> None:
        """Resize the gate.

        Growing the limit wakes as many waiters as now fit.  Shrinking never
        evicts in-flight requests; the new limit applies as they drain.
        """
        self._max = self._clamp(new_limit)
        self._wake()

    def shutdown(self) -> None:
        """Fail parked and future acquires; in-flight slots complete normally."""
        self._closed = True
        while self._waiters:
            fut = self._waiters.popleft()
            if not fut.done():
                fut.set_exception(GateClosed("admission gate is shut down"))

    def snapshot(self) -> dict:
        return {
            "active": self.active,
            "max_concurrency": self._max,
            "limit": self.limit,
            "waiters": self.waiters,
            "high_water": self.high_water,
            "clamp_warnings": self.clamp_warnings,
            "enabled": self.enabled,
        }
