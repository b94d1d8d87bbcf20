"""Centralised retry with exponential backoff, uniform jitter and Retry-After."""

from __future__ import annotations

import asyncio
import enum
import errno
import random
from dataclasses import dataclass, field
from typing import Any, Awaitable, Callable

import aiohttp

from .ratelimit import parse_duration

ATTEMPTS_HEADER = "x-hivemind-attempts"


class Verdict(str, enum.Enum):
    SUCCESS = "success"
    RETRYABLE = "retryable"
    FATAL = "fatal"


@dataclass
class RetryPolicy:
    d_base_s: float = 1.0
    d_max_s: float = 30.0
    max_attempts: int = 5
    retryable_statuses: frozenset[int] = field(
        default_factory=lambda: frozenset({429, 502, 503, 529}))

    def __post_init__(self):
        if self.d_base_s > self.d_max_s:
            raise ValueError("d_base_s must not exceed d_max_s")
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")
        self.retryable_statuses = frozenset(self.retryable_statuses)


class TransportError(Exception):
    """Normalised upstream transport failure (reset, disconnect, refused)."""

    def __init__(self, kind: str, cause: BaseException | None = None):
        self.kind = kind
        self.cause = cause
        super().__init__(f"{kind}: {cause!r}" if cause else kind)


RETRYABLE_TRANSPORT = {"connection_reset", "server_disconnected", "connect_failed"}


def transport_kind(exc: BaseException) -> str | None:
    """Map a client-side exception onto a transport failure kind."""
    if isinstance(exc, TransportError):
        return exc.kind
    if isinstance(exc, aiohttp.ServerDisconnectedError):
        return "server_disconnected"
    if isinstance(exc, aiohttp.ClientPayloadError):
        return "server_disconnected"
    if isinstance(exc, aiohttp.ClientConnectorError):
        return "connect_failed"
    if isinstance(exc, ConnectionResetError):
        return "connection_reset"
    if isinstance(exc, aiohttp.ClientOSError):
        if exc.errno in (errno.ECONNRESET, errno.EPIPE):
            return "connection_reset"
        return "connect_failed"
    if isinstance(exc, (aiohttp.ClientConnectionError, asyncio.IncompleteReadError)):
        return "server_disconnected"
    return None


def classify(status: int | None = None, error: BaseException | None = None,
             policy: RetryPolicy | None = None) -> Verdict:
    statuses = (policy or RetryPolicy()).retryable_statuses
    if error is not None:
        return Verdict.RETRYABLE if transport_kind(error) in RETRYABLE_TRANSPORT else Verdict.FATAL
    if status in statuses:
        return Verdict.RETRYABLE
    if status is not None and 200 <= status < 300:
        return Verdict.SUCCESS
    return Verdict.FATAL


def delay_for(policy: RetryPolicy, k: int, retry_after_s: float | None = None,
              rng: random.Random | None = None) -> float:
    """Delay before retry ``k`` (0-based)."""
    if retry_after_s is not None:
        return max(0.0, retry_after_s)
    u = (rng or random).uniform(0.0, policy.d_base_s)
    return min(policy.d_max_s, policy.d_base_s * 2 ** k + u)


def retry_after_from(headers) -> float | None:
    if headers is None:
        return None
    for k, v in headers.items():
        if k.lower() == "retry-after":
            return parse_duration(v)
    return None


@dataclass
class Outcome:
    """Result of one send: a response object or a transport error."""

    response: Any = None
    error: BaseException | None = None
    verdict: Verdict = Verdict.FATAL
    attempts: int = 1

    @property
    def status(self) -> int | None:
        return getattr(self.response, "status", None)


async def execute_with_retry(
    send: Callable[[], Awaitable[Any]],
    policy: RetryPolicy,
    *,
    before_send: Callable[[int], Awaitable[None]] | None = None,
    on_result: Callable[[int, Outcome], Awaitable[None] | None] | None = None,
    discard: Callable[[Any], Awaitable[None]] | None = None,
    sleep: Callable[[float], Awaitable[None]] = asyncio.sleep,
    rng: random.Random | None = None,
) -> Outcome:
    """Send, retrying retryable outcomes up to ``policy.max_attempts``.

    ``before_send(attempt)`` runs before every send, including the first
    (this is where the rate gate sits).  ``on_result`` sees every attempt.
    ``discard`` disposes of a response that is about to be retried.  The
    last outcome is returned, successful or not.
    """
    attempt = 0
    while True:
        if before_send is not None:
            await before_send(attempt)
        try:
            resp = await send()
            out = Outcome(resp, None, classify(getattr(resp, "status", None), policy=policy))
        except asyncio.CancelledError:
            raise
        except Exception as exc:  # noqa: BLE001 - classified below
            out = Outcome(None, exc, classify(error=exc, policy=policy))
        out.attempts = attempt + 1
        if on_result is not None:
            r = on_result(attempt, out)
            if asyncio.iscoroutine(r):
                await r
        if out.verdict is not Verdict.RETRYABLE or attempt + 1 >= policy.max_attempts:
            return out
        retry_after = retry_after_from(getattr(out.response, "headers", None))
        if out.response is not None and discard is not None:
            await discard(out.response)
        await sleep(delay_for(policy, attempt, retry_after, rng))
        attempt += 1
