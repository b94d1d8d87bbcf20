"""Proactive sliding-window RPM/TPM throttling and reactive header parsing."""

from __future__ import annotations

import asyncio
import logging
import math
import re
import time
from collections import deque
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Awaitable, Callable, Mapping

log = logging.getLogger(__name__)

Clock = Callable[[], float]
Sleep = Callable[[float], Awaitable[None]]


class Infeasible(ValueError):
    """A single request's weight exceeds the window limit; it can never fit."""


class WindowEntry:
    __slots__ = ("ts", "weight")

    def __init__(self, ts: float, weight: int):
        self.ts = ts
        self.weight = weight

    def __repr__(self) -> str:
        return f"WindowEntry({self.ts!r}, {self.weight!r})"


class SlidingWindow:
    """Exact rolling-sum limiter.

    An entry recorded at ``ts`` counts while ``ts > now - window_s``.  The
    weight of all counted entries never exceeds ``limit`` right after an
    admit.
    """

    def __init__(self, limit: int, window_s: float = 60.0, *,
                 clock: Clock = time.monotonic, sleep: Sleep = asyncio.sleep):
        if limit < 1:
            raise ValueError("limit must be >= 1")
        self.limit = int(limit)
        self.window_s = float(window_s)
        self.clock = clock
        self.sleep = sleep
        self.entries: deque[WindowEntry] = deque()
        self._total = 0
        self.pause_until = 0.0

    def prune(self, now: float) -> None:
        # compare expiry instants, not now - window, so floats agree with
        # the times earliest_admit hands out
        while self.entries and self.entries[0].ts + self.window_s <= now:
            self._total -= self.entries.popleft().weight

    def occupancy(self, now: float | None = None) -> int:
        self.prune(self.clock() if now is None else now)
        return self._total

    def earliest_admit(self, now: float, weight: int) -> float:
        """Earliest time at which ``weight`` fits, assuming no new entries."""
        if weight > self.limit:
            raise Infeasible(f"weight {weight} exceeds limit {self.limit}")
        self.prune(now)
        t = now
        excess = self._total + weight - self.limit
        if excess > 0:
            freed = 0
            for entry in self.entries:
                freed += entry.weight
                if freed >= excess:
                    t = entry.ts + self.window_s
                    break
        return max(t, self.pause_until)

    def record(self, ts: float, weight: int) -> WindowEntry:
        entry = WindowEntry(ts, weight)
        # entries stay sorted: callers record with a non-decreasing clock
        self.entries.append(entry)
        self._total += weight
        return entry

    def correct(self, entry: WindowEntry, actual: int) -> None:
        """Replace an estimated weight with the measured one."""
        actual = max(0, int(actual))
        if any(e is entry for e in self.entries):
            self._total += actual - entry.weight
        entry.weight = actual

    def try_admit(self, weight: int = 1, now: float | None = None) -> float | None:
        now = self.clock() if now is None else now
        if self.earliest_admit(now, weight) <= now:
            self.record(now, weight)
            return now
        return None

    async def wait_if_throttled(self, weight: int = 1) -> float:
        """Block until ``weight`` fits in the rolling window, record it, and
        return the admit timestamp."""
        if weight > self.limit:
            raise Infeasible(f"weight {weight} exceeds limit {self.limit}")
        while True:
            now = self.clock()
            t = self.earliest_admit(now, weight)
            if t <= now:
                self.record(now, weight)
                return now
            await self.sleep(t - now)

    def global_pause(self, until: float) -> None:
        if until > self.pause_until:
            self.pause_until = until


# ---------------------------------------------------------------------------
# provider headers


@dataclass
class HeaderState:
    remaining_requests: int | None = None
    limit_requests: int | None = None
    remaining_tokens: int | None = None
    limit_tokens: int | None = None
    reset_requests_s: float | None = None
    retry_after_s: float | None = None
    last_seen: float | None = None
    parse_failures: int = 0


@dataclass(frozen=True)
class PauseDirective:
    pause: bool
    duration_s: float = 0.0


NO_PAUSE = PauseDirective(False, 0.0)

_DURATION_PART = re.compile(r"(\d+(?:\.\d+)?)(ms|h|m|s)")


def parse_duration(value: str, now_wall: float | None = None) -> float | None:
    """Seconds from a plain number, a Go-style duration ("6m0s", "250ms"),
    or an RFC 3339 timestamp (interpreted relative to ``now_wall``)."""
    value = value.strip()
    if not value:
        return None
    try:
        return max(0.0, float(value))
    except ValueError:
        pass
    parts = _DURATION_PART.findall(value)
    if parts and "".join(n + u for n, u in parts) == value:
        scale = {"ms": 0.001, "s": 1.0, "m": 60.0, "h": 3600.0}
        return sum(float(n) * scale[u] for n, u in parts)
    try:
        stamp = datetime.fromisoformat(value.replace("Z", "+00:00"))
    except ValueError:
        return None
    if stamp.tzinfo is None:
        stamp = stamp.replace(tzinfo=timezone.utc)
    now_wall = time.time() if now_wall is None else now_wall
    return max(0.0, stamp.timestamp() - now_wall)


def _lookup(headers: Mapping[str, str], names) -> str | None:
    if isinstance(names, str):
        names = (names,)
    lowered = {k.lower(): v for k, v in headers.items()}
    for name in names:
        v = lowered.get(name.lower())
        if v is not None:
            return v
    return None


def pause_threshold(limit: int, floor: int = 2, fraction: float = 0.10) -> int:
    return max(floor, math.ceil(fraction * limit))


def observe_headers(hs: HeaderState, headers: Mapping[str, str], profile, *,
                    now: float | None = None, now_wall: float | None = None,
                    floor: int = 2, fraction: float = 0.10,
                    default_pause_s: float = 1.0) -> PauseDirective:
    """Update ``hs`` from provider rate-limit headers and decide on a pause.

    Pause when remaining requests <= max(floor, ceil(fraction * limit)).
    Duration is retry-after, else time to window reset, else the default.
    """
    names = profile.header_names
    seen = False

    def integer(role):
        nonlocal seen
        raw = _lookup(headers, names.get(role, ()))
        if raw is None:
            return None
        seen = True
        try:
            return int(float(raw))
        except ValueError:
            hs.parse_failures += 1
            return None

    def duration(role):
        nonlocal seen
        raw = _lookup(headers, names.get(role, ()))
        if raw is None:
            return None
        seen = True
        d = parse_duration(raw, now_wall)
        if d is None:
            hs.parse_failures += 1
        return d

    remaining = integer("requests_remaining")
    limit = integer("requests_limit")
    remaining_tok = integer("tokens_remaining")
    limit_tok = integer("tokens_limit")
    reset = duration("requests_reset")
    retry_after = duration("retry_after")
    if not seen:
        return NO_PAUSE

    hs.last_seen = time.monotonic() if now is None else now
    if remaining is not None:
        hs.remaining_requests = remaining
    if limit is not None:
        hs.limit_requests = limit
    if remaining_tok is not None:
        hs.remaining_tokens = remaining_tok
    if limit_tok is not None:
        hs.limit_tokens = limit_tok
    hs.reset_requests_s = reset
    hs.retry_after_s = retry_after

    if remaining is None:
        return NO_PAUSE
    eff_limit = hs.limit_requests if hs.limit_requests is not None else profile.rpm
    if remaining > pause_threshold(eff_limit, floor, fraction):
        return NO_PAUSE
    if retry_after is not None:
        return PauseDirective(True, retry_after)
    if reset is not None:
        return PauseDirective(True, reset)
    return PauseDirective(True, default_pause_s)


@dataclass
class RateLimiter:
    """RPM and TPM windows sharing one global pause."""

    rpm: SlidingWindow
    tpm: SlidingWindow
    enabled: bool = True
    header_state: HeaderState = field(default_factory=HeaderState)
    pause_floor: int = 2
    pause_fraction: float = 0.10
    default_pause_s: float = 1.0
    pauses: int = 0

    @classmethod
    def build(cls, rpm: int, tpm: int, window_s: float = 60.0, *,
              clock: Clock = time.monotonic, sleep: Sleep = asyncio.sleep,
              **kw) -> "RateLimiter":
        return cls(SlidingWindow(rpm, window_s, clock=clock, sleep=sleep),
                   SlidingWindow(tpm, window_s, clock=clock, sleep=sleep), **kw)

    @property
    def pause_until(self) -> float:
        return self.rpm.pause_until

    def global_pause(self, until: float) -> None:
        self.rpm.global_pause(until)
        self.tpm.global_pause(until)

    async def wait_if_throttled(self, est_tokens: int = 0) -> WindowEntry | None:
        """Pass both windows; returns the TPM entry for later correction."""
        if not self.enabled:
            return None
        est_tokens = min(max(0, est_tokens), self.tpm.limit)
        while True:
            now = self.rpm.clock()
            t = max(self.rpm.earliest_admit(now, 1),
                    self.tpm.earliest_admit(now, est_tokens))
            if t <= now:
                self.rpm.record(now, 1)
                return self.tpm.record(now, est_tokens)
            await self.rpm.sleep(t - now)

    def correct_tokens(self, entry: WindowEntry | None, actual: int) -> None:
        if entry is not None:
            self.tpm.correct(entry, actual)

    def on_response_headers(self, headers: Mapping[str, str], profile) -> PauseDirective:
        directive = observe_headers(
            self.header_state, headers, profile,
            now=self.rpm.clock(), floor=self.pause_floor,
            fraction=self.pause_fraction, default_pause_s=self.default_pause_s)
        if directive.pause and self.enabled:
            self.pauses += 1
            self.global_pause(self.rpm.clock() + directive.duration_s)
        return directive

    def snapshot(self) -> dict:
        now = self.rpm.clock()
        return {
            "enabled": self.enabled,
            "rpm_limit": self.rpm.limit,
            "rpm_window": self.rpm.occupancy(now),
            "tpm_limit": self.tpm.limit,
            "tpm_window": self.tpm.occupancy(now),
            "paused_for_s": max(0.0, self.pause_until - now),
            "pauses": self.pauses,
            "header_parse_failures": self.header_state.parse_failures,
        }


def format_seconds(seconds: float) -> str:
    """Header-friendly seconds: integers stay integers, fractions keep ms."""
    ms = math.ceil(max(0.0, seconds) * 1000 - 1e-6)
    if ms % 1000 == 0:
        return str(ms // 1000)
    return f"{ms / 1000:.3f}".rstrip("0")
