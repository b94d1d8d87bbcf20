"""AIMD concurrency control fused with a three-state circuit breaker.

Every change to the concurrency level is pushed synchronously into the
admission gate, so the two never drift apart.
"""

from __future__ import annotations

import enum
import logging
import time
from collections import deque
from dataclasses import dataclass
from typing import Callable

log = logging.getLogger(__name__)


class Circuit(str, enum.Enum):
    CLOSED = "closed"
    OPEN = "open"
    HALF_OPEN = "half_open"


# the only transitions the breaker may take
EDGES = {
    (Circuit.CLOSED, Circuit.OPEN),
    (Circuit.OPEN, Circuit.HALF_OPEN),
    (Circuit.HALF_OPEN, Circuit.CLOSED),
    (Circuit.HALF_OPEN, Circuit.OPEN),
}


class NoProbeOutstanding(RuntimeError):
    pass


@dataclass(frozen=True)
class Decision:
    action: str  # "proceed" | "fast_fail" | "probe"
    retry_after_s: float = 0.0

    @property
    def proceed(self) -> bool:
        return self.action != "fast_fail"


PROCEED = Decision("proceed")
PROBE = Decision("probe")


@dataclass
class BackpressureParams:
    alpha: float = 0.5
    beta: float = 0.5
    l_target_ms: float = 2000.0
    c_min: float = 1.0
    c_max: float = 5.0
    latency_window: int = 20
    error_window: int = 20
    tau: float = 0.5
    t_cool_s: float = 10.0
    update_min_samples: int = 5
    update_min_interval_s: float = 1.0


class BackpressureController:
    def __init__(self, params: BackpressureParams | None = None, *,
                 clock: Callable[[], float] = time.monotonic,
                 admission=None, enabled: bool = True):
        self.p = params or BackpressureParams()
        if self.p.c_min > self.p.c_max:
            raise ValueError("c_min must not exceed c_max")
        self.clock = clock
        self.enabled = enabled
        self.c = float(self.p.c_max)
        self.latencies: deque[float] = deque(maxlen=self.p.latency_window)
        self.outcomes: deque[bool] = deque(maxlen=self.p.error_window)  # True = error
        self.circuit = Circuit.CLOSED
        self.t_open: float | None = None
        self.probe_outstanding = False
        self.transitions: list[tuple[Circuit, Circuit]] = []
        self.fast_fails = 0
        self._samples_since_update = 0
        self._last_update = self.clock()
        self.admission = None
        if admission is not None:
            self.set_admission(admission)

    def set_admission(self, admission) -> None:
        self.admission = admission
        if self.enabled:
            admission.set_max_concurrency(self.c)

    def _push(self) -> None:
        if self.admission is not None:
            self.admission.set_max_concurrency(self.c)

    def _move(self, new: Circuit) -> None:
        old = self.circuit
        assert (old, new) in EDGES, f"illegal circuit edge {old}->{new}"
        self.circuit = new
        self.transitions.append((old, new))
        log.info("circuit %s -> %s", old.value, new.value)

    def _increase(self) -> None:
        self.c = min(self.p.c_max, self.c + self.p.alpha)

    def _decrease(self) -> None:
        self.c = max(self.p.c_min, self.c * self.p.beta)

    @property
    def error_count(self) -> int:
        return sum(self.outcomes)

    def on_latency_sample(self, latency_ms: float) -> float | None:
        """Record a successful request; returns the new level when it changed."""
        if not self.enabled:
            return None
        self.latencies.append(float(latency_ms))
        self.outcomes.append(False)
        self._samples_since_update += 1
        now = self.clock()
        if (self._samples_since_update < self.p.update_min_samples
                or now - self._last_update < self.p.update_min_interval_s):
            return None
        self._samples_since_update = 0
        self._last_update = now
        mean = sum(self.latencies) / len(self.latencies)
        old = self.c
        if mean <= self.p.l_target_ms:
            self._increase()
        else:
            self._decrease()
        self._push()
        return self.c if self.c != old else None

    def on_error(self) -> tuple[Circuit, Circuit] | None:
        """Record a retryable upstream failure.  Returns the circuit
        transition when one happened."""
        if not self.enabled:
            return None
        self._decrease()
        self.outcomes.append(True)
        self._push()
        n = len(self.outcomes)
        if (self.circuit is Circuit.CLOSED and n >= self.p.error_window
                and self.error_count / n >= self.p.tau):
            self._move(Circuit.OPEN)
            self.t_open = self.clock()
            return (Circuit.CLOSED, Circuit.OPEN)
        return None

    def check_circuit(self) -> Decision:
        if not self.enabled or self.circuit is Circuit.CLOSED:
            return PROCEED
        now = self.clock()
        if self.circuit is Circuit.OPEN:
            ready_at = self.t_open + self.p.t_cool_s
            if now <= ready_at:
                self.fast_fails += 1
                return Decision("fast_fail", ready_at - now)
            self._move(Circuit.HALF_OPEN)
            self.probe_outstanding = True
            return PROBE
        if not self.probe_outstanding:
            self.probe_outstanding = True
            return PROBE
        # half-open: the single probe is already in flight
        self.fast_fails += 1
        return Decision("fast_fail", self.p.t_cool_s)

    def on_probe_result(self, success: bool) -> None:
        if self.circuit is not Circuit.HALF_OPEN or not self.probe_outstanding:
            raise NoProbeOutstanding("no half-open probe is outstanding")
        self.probe_outstanding = False
        if success:
            self._move(Circuit.CLOSED)
            self.outcomes.clear()
        else:
            self._move(Circuit.OPEN)
            self.t_open = self.clock()

    def abandon_probe(self) -> None:
        """The probe holder never reached upstream; hand the probe to the
        next caller instead of wedging the breaker half-open."""
        if self.circuit is Circuit.HALF_OPEN:
            self.probe_outstanding = False

    def snapshot(self) -> dict:
        return {
            "enabled": self.enabled,
            "c": self.c,
            "c_min": self.p.c_min,
            "c_max": self.p.c_max,
            "circuit": self.circuit.value,
            "errors_in_window": self.error_count,
            "window_len": len(self.outcomes),
            "fast_fails": self.fast_fails,
        }
