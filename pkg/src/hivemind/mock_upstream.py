"""Mock LLM API server with rate limits, error injection and SSE streaming.

Per request, in order: connection cap, injected reset, injected 502, rolling
RPM window, then a latency-delayed completion.  Every request past the
connection cap counts toward the RPM window, failed ones included, unless
it was itself rejected with a 429.  Every request draws its
random numbers in a fixed order from one seeded stream, so a given request
sequence always yields the same outcomes.
"""

from __future__ import annotations

import asyncio
import json
import logging
import math
import random
import socket
import struct
import time
from collections import Counter, deque
from dataclasses import asdict, dataclass, fields
from datetime import datetime, timezone

from aiohttp import web

from .budget import estimate_tokens
from .ratelimit import format_seconds

log = logging.getLogger(__name__)

LOREM = (
    "Lorem ipsum dolor sit amet, consectetur adipiscing elit, sed do eiusmod "
    "tempor incididunt ut labore et dolore magna aliqua. Ut enim ad minim veniam, "
    "quis nostrud exercitation ullamco laboris nisi ut aliquip ex ea commodo "
    "consequat. Duis aute irure dolor in reprehenderit in voluptate velit esse "
    "cillum dolore eu fugiat nulla pariatur. Excepteur sint occaecat cupidatat. "
)


def lorem(n_chars: int) -> str:
    reps = n_chars // len(LOREM) + 1
    return (LOREM * reps)[:n_chars]


@dataclass
class MockConfig:
    rpm_limit: int = 50
    window_s: float = 60.0
    p_502: float = 0.0
    p_reset: float = 0.0
    base_latency_ms: float = 200.0
    jitter_ms: float = 100.0
    spike_period_s: float | None = None
    spike_magnitude_ms: float = 0.0
    spike_duration_s: float | None = None
    max_connections: int = 5
    # "collapse": exceeding the cap drops every in-flight connection too;
    # "reject": only the connection over the cap is dropped
    overload: str = "collapse"
    format: str = "anthropic"
    emit_headers: bool = True
    seed: int = 0
    output_chars: int = 400
    stream_chunks: int = 8

    def validate(self) -> "MockConfig":
        for name in ("p_502", "p_reset"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.rpm_limit < 1 or self.max_connections < 1:
            raise ValueError("rpm_limit and max_connections must be >= 1")
        if self.format not in ("anthropic", "openai"):
            raise ValueError(f"unknown format {self.format!r}")
        if self.overload not in ("collapse", "reject"):
            raise ValueError(f"unknown overload mode {self.overload!r}")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "MockConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known}).validate()


class _Conn:
    __slots__ = ("doomed",)

    def __init__(self):
        self.doomed = False


class MockUpstream:
    def __init__(self, config: MockConfig | None = None):
        self.config = (config or MockConfig()).validate()
        self._runner: web.AppRunner | None = None
        self.port: int | None = None
        self.reset_state()

    def reset_state(self) -> None:
        self.rng = random.Random(self.config.seed)
        self.window: deque[float] = deque()
        self.inflight: set[_Conn] = set()
        self.counts: Counter = Counter()
        self.max_observed = 0
        self.statuses: list[str] = []
        self.t_start = time.monotonic()

    # -- lifecycle --------------------------------------------------------

    def app(self) -> web.Application:
        app = web.Application(client_max_size=64 * 1024 ** 2)
        app.router.add_get("/__mock/stats", self.stats_handler)
        app.router.add_post("/__mock/reset", self.reset_handler)
        app.router.add_route("*", "/{tail:.*}", self.serve)
        return app

    async def start(self, host: str = "127.0.0.1", port: int = 0) -> int:
        self._runner = web.AppRunner(self.app(), access_log=None, handler_cancellation=True)
        await self._runner.setup()
        site = web.TCPSite(self._runner, host, port, backlog=1024)
        await site.start()
        self.port = self._runner.addresses[0][1]
        return self.port

    @property
    def url(self) -> str:
        return f"http://127.0.0.1:{self.port}"

    async def stop(self) -> None:
        if self._runner is not None:
            await self._runner.cleanup()
            self._runner = None

    # -- behaviour --------------------------------------------------------

    def _window_count(self, now: float) -> int:
        horizon = now - self.config.window_s
        while self.window and self.window[0] <= horizon:
            self.window.popleft()
        return len(self.window)

    def _seconds_to_free(self, now: float) -> float:
        if not self.window:
            return 0.0
        return max(0.0, self.window[0] + self.config.window_s - now)

    def _spiking(self, now: float) -> bool:
        c = self.config
        if not c.spike_period_s:
            return False
        duration = c.spike_duration_s if c.spike_duration_s is not None else c.spike_period_s / 3
        return (now - self.t_start) % c.spike_period_s < duration

    def _rate_headers(self, now: float, fmt: str) -> dict:
        c = self.config
        if not c.emit_headers:
            return {}
        remaining = max(0, c.rpm_limit - self._window_count(now))
        to_free = self._seconds_to_free(now)
        if fmt == "openai":
            return {
                "x-ratelimit-limit-requests": str(c.rpm_limit),
                "x-ratelimit-remaining-requests": str(remaining),
                "x-ratelimit-reset-requests": f"{format_seconds(to_free)}s",
            }
        reset_at = datetime.fromtimestamp(time.time() + to_free, tz=timezone.utc)
        return {
            "anthropic-ratelimit-requests-limit": str(c.rpm_limit),
            "anthropic-ratelimit-requests-remaining": str(remaining),
            "anthropic-ratelimit-requests-reset": reset_at.isoformat(timespec="milliseconds"),
        }

    def _abort(self, request: web.Request) -> None:
        transport = request.transport
        if transport is None:
            return
        sock = transport.get_extra_info("socket")
        if sock is not None:
            try:
                # linger 0 turns close into a TCP RST
                sock.setsockopt(socket.SOL_SOCKET, socket.SO_LINGER, struct.pack("ii", 1, 0))
            except OSError:
                pass
        transport.abort()

    def _outcome(self, label: str) -> None:
        self.statuses.append(label)
        self.counts[label] += 1

    async def serve(self, request: web.Request) -> web.StreamResponse:
        c = self.config
        body = await request.read()
        self.counts["requests"] += 1
        # fixed draw order per request keeps runs reproducible
        u_reset = self.rng.random()
        u_502 = self.rng.random()
        latency_ms = c.base_latency_ms + self.rng.uniform(0.0, c.jitter_ms)

        conn = _Conn()
        self.inflight.add(conn)
        self.max_observed = max(self.max_observed, len(self.inflight))
        try:
            if len(self.inflight) > c.max_connections:
                if c.overload == "collapse":
                    for other in self.inflight:
                        other.doomed = True
                self.inflight.discard(conn)
                self._outcome("reset")
                self._abort(request)
                return web.Response(status=500)
            now = time.monotonic()
            # injected failures still consume window capacity when there is room
            room = self._window_count(now) < c.rpm_limit
            if u_reset < c.p_reset:
                if room:
                    self.window.append(now)
                self.inflight.discard(conn)
                self._outcome("reset")
                self._abort(request)
                return web.Response(status=500)

            fmt = "openai" if request.path.rstrip("/").endswith("chat/completions") else c.format
            if u_502 < c.p_502:
                if room:
                    self.window.append(now)
                self.inflight.discard(conn)
                self._outcome("502")
                return web.json_response(
                    {"type": "error", "error": {"type": "api_error", "message": "Bad Gateway"}},
                    status=502)

            if not room:
                retry_after = self._seconds_to_free(now)
                headers = self._rate_headers(now, fmt)
                headers["retry-after"] = format_seconds(retry_after)
                self.inflight.discard(conn)
                self._outcome("429")
                return web.json_response(
                    {"type": "error", "error": {"type": "rate_limit_error",
                                                "message": "Rate limit exceeded"}},
                    status=429, headers=headers)
            self.window.append(now)

            if self._spiking(now):
                latency_ms += c.spike_magnitude_ms
            await asyncio.sleep(latency_ms / 1000)
            if conn.doomed:
                self.inflight.discard(conn)
                self._outcome("reset")
                self._abort(request)
                return web.Response(status=500)

            try:
                payload = json.loads(body) if body else {}
            except ValueError:
                payload = {}
            stream = isinstance(payload, dict) and bool(payload.get("stream"))
            model = payload.get("model", "mock-model") if isinstance(payload, dict) else "mock-model"
            text = lorem(c.output_chars)
            usage_in = estimate_tokens(len(body))
            usage_out = estimate_tokens(len(text))
            headers = self._rate_headers(time.monotonic(), fmt)
            if stream:
                return await self._stream(request, conn, fmt, model, text, usage_in,
                                          usage_out, headers)
            self.inflight.discard(conn)
            self._outcome("200")
            return web.json_response(
                self._completion(fmt, model, text, usage_in, usage_out), headers=headers)
        finally:
            self.inflight.discard(conn)

    def _completion(self, fmt, model, text, usage_in, usage_out) -> dict:
        n = self.counts["requests"]
        if fmt == "openai":
            return {
                "id": f"chatcmpl-mock-{n}", "object": "chat.completion", "model": model,
                "choices": [{"index": 0, "finish_reason": "stop",
                             "message": {"role": "assistant", "content": text}}],
                "usage": {"prompt_tokens": usage_in, "completion_tokens": usage_out,
                          "total_tokens": usage_in + usage_out},
            }
        return {
            "id": f"msg_mock_{n}", "type": "message", "role": "assistant", "model": model,
            "content": [{"type": "text", "text": text}],
            "stop_reason": "end_turn", "stop_sequence": None,
            "usage": {"input_tokens": usage_in, "output_tokens": usage_out},
        }

    def sse_events(self, fmt, model, text, usage_in, usage_out) -> list[bytes]:
        n_chunks = max(1, self.config.stream_chunks)
        size = math.ceil(len(text) / n_chunks)
        pieces = [text[i:i + size] for i in range(0, len(text), size)]
        n = self.counts["requests"]

        def ev(name, data):
            return f"event: {name}\ndata: {json.dumps(data)}\n\n".encode()

        if fmt == "openai":
            def chunk(delta, finish=None, usage=None):
                d = {"id": f"chatcmpl-mock-{n}", "object": "chat.completion.chunk",
                     "model": model,
                     "choices": [{"index": 0, "delta": delta, "finish_reason": finish}]}
                if usage is not None:
                    d["choices"] = []
                    d["usage"] = usage
                return f"data: {json.dumps(d)}\n\n".encode()
            out = [chunk({"role": "assistant", "content": ""})]
            out += [chunk({"content": p}) for p in pieces]
            out.append(chunk({}, "stop"))
            out.append(chunk({}, usage={"prompt_tokens": usage_in,
                                        "completion_tokens": usage_out,
                                        "total_tokens": usage_in + usage_out}))
            out.append(b"data: [DONE]\n\n")
            return out
        out = [ev("message_start", {"type": "message_start", "message": {
            "id": f"msg_mock_{n}", "type": "message", "role": "assistant", "model": model,
            "content": [], "stop_reason": None,
            "usage": {"input_tokens": usage_in, "output_tokens": 1}}})]
        out.append(ev("content_block_start", {"type": "content_block_start", "index": 0,
                                              "content_block": {"type": "text", "text": ""}}))
        out += [ev("content_block_delta", {"type": "content_block_delta", "index": 0,
                                           "delta": {"type": "text_delta", "text": p}})
                for p in pieces]
        out.append(ev("content_block_stop", {"type": "content_block_stop", "index": 0}))
        out.append(ev("message_delta", {"type": "message_delta",
                                        "delta": {"stop_reason": "end_turn"},
                                        "usage": {"output_tokens": usage_out}}))
        out.append(ev("message_stop", {"type": "message_stop"}))
        return out

    async def _stream(self, request, conn, fmt, model, text, usage_in, usage_out,
                      headers) -> web.StreamResponse:
        resp = web.StreamResponse(status=200, headers={
            **headers, "content-type": "text/event-stream", "cache-control": "no-cache"})
        await resp.prepare(request)
        events = self.sse_events(fmt, model, text, usage_in, usage_out)
        for i, event in enumerate(events):
            if conn.doomed:
                self.inflight.discard(conn)
                self._outcome("reset")
                self._abort(request)
                return resp
            if i == len(events) - 1:
                self.inflight.discard(conn)
            await resp.write(event)
            await asyncio.sleep(0.001)
        self._outcome("200")
        await resp.write_eof()
        return resp

    # -- observability ----------------------------------------------------

    def stats(self) -> dict:
        now = time.monotonic()
        return {
            "requests": self.counts["requests"],
            "served": self.counts["200"],
            "rate_limited": self.counts["429"],
            "errors_502": self.counts["502"],
            "resets": self.counts["reset"],
            "max_observed_concurrency": self.max_observed,
            "inflight": len(self.inflight),
            "window_count": self._window_count(now),
            "statuses": list(self.statuses),
            "config": asdict(self.config),
        }

    async def stats_handler(self, request: web.Request) -> web.Response:
        return web.json_response(self.stats())

    async def reset_handler(self, request: web.Request) -> web.Response:
        self.reset_state()
        return web.json_response({"reset": True})


async def serve(config: MockConfig, host: str = "127.0.0.1", port: int = 9000) -> None:
    mock = MockUpstream(config)
    await mock.start(host, port)
    log.info("mock upstream on %s:%s", host, mock.port)
    try:
        await asyncio.Event().wait()
    finally:
        await mock.stop()
