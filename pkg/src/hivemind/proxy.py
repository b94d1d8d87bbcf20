"""Transparent scheduling reverse proxy.

Each request walks the pipeline: circuit check, budget check, admission,
rate gate, upstream send (with centralised retry), token accounting and
backpressure feedback.  SSE responses are streamed through chunk by chunk.
"""

from __future__ import annotations

import asyncio
import json
import logging
import time
from collections import Counter, deque
from dataclasses import asdict, dataclass
from pathlib import Path

import aiohttp
from aiohttp import web

from .admission import AdmissionGate
from .backpressure import BackpressureController, BackpressureParams
from .budget import (AGENT_HEADER, WARNING_HEADER, BudgetExhausted, BudgetManager,
                     derive_agent_id, estimate_tokens)
from .config import ProxySettings
from .ratelimit import RateLimiter, format_seconds
from .retry import ATTEMPTS_HEADER, Outcome, RetryPolicy, Verdict, execute_with_retry, transport_kind
from .tokens import HEURISTIC, SSEUsageTracker, Usage, extract_tokens

log = logging.getLogger(__name__)

HOP_BY_HOP = frozenset({
    "connection", "keep-alive", "proxy-authenticate", "proxy-authorization",
    "te", "trailer", "trailers", "transfer-encoding", "upgrade",
})
STRIP_REQUEST = HOP_BY_HOP | {"host", "content-length", AGENT_HEADER}
STRIP_RESPONSE = HOP_BY_HOP | {"content-length"}


@dataclass
class UsageRecord:
    agent_id: str
    input_tokens: int
    output_tokens: int
    latency_ms: float
    outcome: str
    attempts: int
    source: str = "exact"


@dataclass
class Upstream:
    """One upstream attempt whose headers (and, if buffered, body) arrived."""

    resp: aiohttp.ClientResponse
    body: bytes | None
    latency_ms: float
    streaming: bool

    @property
    def status(self) -> int:
        return self.resp.status

    @property
    def headers(self):
        return self.resp.headers


def is_event_stream(headers) -> bool:
    return headers.get("content-type", "").split(";")[0].strip().lower() == "text/event-stream"


def error_body(kind: str, message: str) -> bytes:
    return json.dumps({"type": "error", "error": {"type": kind, "message": message}}).encode()


class Proxy:
    def __init__(self, settings: ProxySettings, *, clock=time.monotonic):
        self.settings = settings.validate()
        self.clock = clock
        self.profile = settings.profile()
        p = self.profile
        s = settings
        self.admission = AdmissionGate(p.max_concurrency, enabled=s.enabled("admission"))
        self.ratelimiter = RateLimiter.build(
            p.rpm, p.tpm, s.seconds("window_s"), clock=clock,
            enabled=s.enabled("ratelimit"), pause_floor=s.pause_floor,
            pause_fraction=s.pause_fraction, default_pause_s=s.seconds("default_pause_s"))
        self.backpressure = BackpressureController(
            BackpressureParams(
                alpha=p.alpha, beta=p.beta, l_target_ms=p.l_target_ms * s.time_scale,
                c_min=s.c_min, c_max=p.max_concurrency,
                latency_window=s.latency_window, error_window=s.error_window,
                tau=s.tau, t_cool_s=s.seconds("t_cool_s"),
                update_min_samples=s.update_min_samples,
                update_min_interval_s=s.seconds("update_min_interval_s")),
            clock=clock, enabled=s.enabled("backpressure"))
        self.backpressure.set_admission(self.admission)
        self.retry_policy = RetryPolicy(
            d_base_s=s.seconds("d_base_s"), d_max_s=s.seconds("d_max_s"),
            max_attempts=s.max_attempts if s.enabled("retry") else 1,
            retryable_statuses=frozenset(p.retryable_statuses))
        self.budget = BudgetManager(
            pool_total=s.pool_total, max_agents=s.max_agents, warn_fraction=s.warn_fraction,
            checkpoint_dir=Path(s.checkpoint_dir), enabled=s.enabled("budget"))
        self.counters: Counter = Counter()
        self.usage_log: deque[UsageRecord] = deque(maxlen=10_000)
        self.session: aiohttp.ClientSession | None = None
        self._runner: web.AppRunner | None = None
        self.port: int | None = None

    # -- lifecycle --------------------------------------------------------

    def app(self) -> web.Application:
        app = web.Application(client_max_size=64 * 1024 ** 2)
        app.router.add_get("/hm/metrics", self.metrics_handler)
        app.router.add_route("*", "/{tail:.*}", self.handle)
        app.on_startup.append(self._open_session)
        app.on_cleanup.append(self._close_session)
        return app

    async def _open_session(self, _app=None) -> None:
        if self.session is None:
            self.session = aiohttp.ClientSession(
                auto_decompress=False,
                connector=aiohttp.TCPConnector(limit=0, force_close=False),
                timeout=aiohttp.ClientTimeout(total=None, sock_connect=30))

    async def _close_session(self, _app=None) -> None:
        if self.session is not None:
            await self.session.close()
            self.session = None

    async def start(self, host: str | None = None, port: int | None = None) -> int:
        self._runner = web.AppRunner(self.app(), access_log=None)
        await self._runner.setup()
        site = web.TCPSite(self._runner, host or self.settings.host,
                           self.settings.port if port is None else port)
        await site.start()
        self.port = self._runner.addresses[0][1]
        log.info("proxy on %s:%s -> %s (%s profile)", host or self.settings.host,
                 self.port, self.settings.upstream, self.profile.name)
        return self.port

    async def stop(self) -> None:
        self.admission.shutdown()
        if self._runner is not None:
            await self._runner.cleanup()
            self._runner = None

    # -- pipeline ---------------------------------------------------------

    def upstream_url(self, path_qs: str) -> str:
        return self.settings.upstream.rstrip("/") + path_qs

    def _forward_headers(self, headers) -> dict:
        return {k: v for k, v in headers.items() if k.lower() not in STRIP_REQUEST}

    def _response_headers(self, headers, attempts: int, agent_id: str) -> dict:
        out = {}
        for k, v in headers.items():
            if k.lower() not in STRIP_RESPONSE:
                out[k] = v
        out[ATTEMPTS_HEADER] = str(attempts)
        pct = self.budget.warning_percent(agent_id)
        if pct is not None:
            out[WARNING_HEADER] = str(pct)
        return out

    async def handle(self, request: web.Request) -> web.StreamResponse:
        body = await request.read()
        agent_id = derive_agent_id(request.headers, request.remote)
        self.counters["requests_total"] += 1

        decision = self.backpressure.check_circuit()
        if not decision.proceed:
            self.counters["fast_fails"] += 1
            return web.Response(
                status=503, body=error_body("overloaded_error", "circuit open"),
                content_type="application/json",
                headers={"Retry-After": format_seconds(decision.retry_after_s)})
        probe = decision.action == "probe"

        verdict = self.budget.admit(agent_id)
        if not verdict.allow:
            if probe:
                self.backpressure.abandon_probe()
            self.counters["budget_denials"] += 1
            return web.Response(
                status=429, body=error_body("budget_exhausted", verdict.reason),
                content_type="application/json")

        try:
            guard = await self.admission.acquire()
        except BaseException:
            if probe:
                self.backpressure.abandon_probe()
            raise
        try:
            return await self._forward(request, body, agent_id, probe)
        finally:
            if not guard.released:
                guard.release()

    async def _forward(self, request: web.Request, body: bytes, agent_id: str,
                       probe: bool) -> web.StreamResponse:
        est = estimate_tokens(len(body))
        url = self.upstream_url(request.path_qs)
        fwd_headers = self._forward_headers(request.headers)
        tpm_entry = None

        async def before_send(attempt: int) -> None:
            nonlocal tpm_entry
            tpm_entry = await self.ratelimiter.wait_if_throttled(est)

        async def send() -> Upstream:
            t0 = self.clock()
            resp = await self.session.request(
                request.method, url, headers=fwd_headers, data=body, allow_redirects=False)
            if is_event_stream(resp.headers):
                return Upstream(resp, None, (self.clock() - t0) * 1000, True)
            try:
                data = await resp.read()
            finally:
                resp.release()
            return Upstream(resp, data, (self.clock() - t0) * 1000, False)

        def on_result(attempt: int, out: Outcome) -> None:
            self.counters["upstream_attempts"] += 1
            if attempt > 0:
                self.counters["retries"] += 1
            if out.response is not None:
                self.ratelimiter.on_response_headers(out.response.headers, self.profile)
            if out.verdict is Verdict.RETRYABLE:
                self.counters["upstream_errors"] += 1
                self.backpressure.on_error()
            if probe and attempt == 0:
                self.backpressure.on_probe_result(out.verdict is not Verdict.RETRYABLE)

        async def discard(up: Upstream) -> None:
            up.resp.release()

        try:
            out = await execute_with_retry(send, self.retry_policy, before_send=before_send,
                                           on_result=on_result, discard=discard)
        except BaseException:
            if probe and self.backpressure.probe_outstanding:
                self.backpressure.abandon_probe()
            raise

        if out.error is not None:
            kind = transport_kind(out.error) or type(out.error).__name__
            self._record(agent_id, Usage(0, 0, HEURISTIC), 0.0, kind, out.attempts)
            return web.Response(status=502, body=error_body("upstream_error", kind),
                                content_type="application/json",
                                headers={ATTEMPTS_HEADER: str(out.attempts)})

        up: Upstream = out.response
        if up.streaming:
            return await self._stream(request, up, agent_id, out.attempts, tpm_entry)

        streaming_body = is_event_stream(up.headers)
        usage = extract_tokens(up.body, streaming=streaming_body)
        success = out.verdict is Verdict.SUCCESS
        if success:
            self.backpressure.on_latency_sample(up.latency_ms)
            self._account(agent_id, usage, tpm_entry, request)
        headers = self._response_headers(up.headers, out.attempts, agent_id)
        self._record(agent_id, usage if success else Usage(0, 0, usage.source),
                     up.latency_ms, str(up.status), out.attempts)
        return web.Response(status=up.status, body=up.body, headers=headers)

    async def _stream(self, request, up: Upstream, agent_id: str, attempts: int,
                      tpm_entry) -> web.StreamResponse:
        resp = up.resp
        success = 200 <= up.status < 300
        sresp = web.StreamResponse(status=up.status,
                                   headers=self._response_headers(resp.headers, attempts, agent_id))
        tracker = SSEUsageTracker()
        try:
            await sresp.prepare(request)
            async for chunk in resp.content.iter_any():
                tracker.feed(chunk)
                await sresp.write(chunk)
            tracker.close()
        except (aiohttp.ClientError, asyncio.IncompleteReadError, ConnectionError) as exc:
            # bytes already reached the client; a mid-stream failure cannot be retried
            self.counters["midstream_failures"] += 1
            self.backpressure.on_error()
            kind = transport_kind(exc) or type(exc).__name__
            self._record(agent_id, tracker.usage(), up.latency_ms, kind, attempts)
            if request.transport is not None:
                request.transport.close()
            return sresp
        finally:
            resp.release()
        usage = tracker.usage()
        if success:
            self.backpressure.on_latency_sample(up.latency_ms)
            self._account(agent_id, usage, tpm_entry, request)
        self._record(agent_id, usage, up.latency_ms, str(up.status), attempts)
        await sresp.write_eof()
        return sresp

    def _account(self, agent_id: str, usage: Usage, tpm_entry, request) -> None:
        if usage.source == HEURISTIC:
            self.counters["token_heuristic_fallbacks"] += 1
        self.ratelimiter.correct_tokens(tpm_entry, usage.total)
        try:
            self.budget.record_usage(agent_id, usage.input_tokens, usage.output_tokens,
                                     meta={"method": request.method, "path": request.path})
        except BudgetExhausted:
            self.counters["usage_after_kill"] += 1

    def _record(self, agent_id, usage: Usage, latency_ms, outcome, attempts) -> None:
        self.usage_log.append(UsageRecord(agent_id, usage.input_tokens, usage.output_tokens,
                                          latency_ms, outcome, attempts, usage.source))

    # -- observability ----------------------------------------------------

    def metrics_snapshot(self) -> dict:
        adm = self.admission.snapshot()
        bp = self.backpressure.snapshot()
        rl = self.ratelimiter.snapshot()
        budget = self.budget.snapshot()
        counters = {k: self.counters.get(k, 0) for k in (
            "requests_total", "upstream_attempts", "retries", "upstream_errors",
            "fast_fails", "budget_denials", "midstream_failures",
            "token_heuristic_fallbacks", "usage_after_kill")}
        counters["budget_kills"] = budget["budget_kills"]
        return {
            "provider": self.profile.name,
            "gauges": {
                "active": adm["active"],
                "waiters": adm["waiters"],
                "c_max": adm["max_concurrency"],
                "c_t": bp["c"],
                "circuit": bp["circuit"],
                "rpm_window": rl["rpm_window"],
                "tpm_window": rl["tpm_window"],
                "paused_for_s": rl["paused_for_s"],
            },
            "counters": counters,
            "agents": budget["agents"],
            "admission": adm,
            "backpressure": bp,
            "ratelimit": rl,
            "recent_usage": [asdict(r) for r in list(self.usage_log)[-20:]],
        }

    async def metrics_handler(self, request: web.Request) -> web.Response:
        return web.json_response(self.metrics_snapshot())


async def serve(settings: ProxySettings) -> None:
    proxy = Proxy(settings)
    await proxy.start()
    try:
        await asyncio.Event().wait()
    finally:
        await proxy.stop()
