import asyncio

import pytest


class FakeClock:
    """Manually advanced monotonic clock with a matching async sleep."""

    def __init__(self, start: float = 1000.0):
        self.now = start
        self.sleeps: list[float] = []

    def __call__(self) -> float:
        return self.now

    def advance(self, dt: float) -> None:
        self.now += dt

    async def sleep(self, dt: float) -> None:
        self.sleeps.append(dt)
        self.now += max(0.0, dt)
        await asyncio.sleep(0)


@pytest.fixture
def clock():
    return FakeClock()


import socket
import struct
from dataclasses import dataclass, field

from aiohttp import web


@dataclass
class Reply:
    status: int = 200
    body: bytes | dict = b'{"usage": {"input_tokens": 10, "output_tokens": 5}}'
    headers: dict = field(default_factory=dict)
    chunks: list[bytes] | None = None  # SSE body, written one chunk at a time
    reset: bool = False                # drop the connection with a TCP RST
    cut_after: int | None = None       # abort the stream after this many chunks
    delay_s: float = 0.0


class ScriptedUpstream:
    """Tiny upstream that replays a script of replies and records requests."""

    def __init__(self, script=None, default: Reply | None = None):
        self.script = list(script or [])
        self.default = default or Reply()
        self.requests: list[dict] = []
        self.inflight = 0
        self.max_inflight = 0
        self._runner = None
        self.url = None

    async def start(self):
        app = web.Application()
        app.router.add_route("*", "/{tail:.*}", self.handle)
        self._runner = web.AppRunner(app, access_log=None)
        await self._runner.setup()
        site = web.TCPSite(self._runner, "127.0.0.1", 0)
        await site.start()
        self.url = f"http://127.0.0.1:{self._runner.addresses[0][1]}"
        return self

    async def stop(self):
        await self._runner.cleanup()

    @staticmethod
    def _abort(request):
        sock = request.transport.get_extra_info("socket")
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_LINGER, struct.pack("ii", 1, 0))
        request.transport.abort()

    async def handle(self, request):
        body = await request.read()
        self.requests.append({"method": request.method, "path": request.path_qs,
                              "headers": dict(request.headers), "body": body})
        reply = self.script.pop(0) if self.script else self.default
        self.inflight += 1
        self.max_inflight = max(self.max_inflight, self.inflight)
        try:
            if reply.delay_s:
                await asyncio.sleep(reply.delay_s)
            if reply.reset:
                self._abort(request)
                return web.Response(status=500)
            if reply.chunks is not None:
                resp = web.StreamResponse(status=reply.status, headers={
                    "content-type": "text/event-stream", **reply.headers})
                await resp.prepare(request)
                for i, chunk in enumerate(reply.chunks):
                    if reply.cut_after is not None and i == reply.cut_after:
                        self._abort(request)
                        return resp
                    await resp.write(chunk)
                    await asyncio.sleep(0.005)
                await resp.write_eof()
                return resp
            if isinstance(reply.body, dict):
                return web.json_response(reply.body, status=reply.status, headers=reply.headers)
            return web.Response(status=reply.status, body=reply.body,
                                headers={"content-type": "application/json", **reply.headers})
        finally:
            self.inflight -= 1


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
