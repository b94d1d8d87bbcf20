"""Token usage extraction from JSON bodies and SSE streams."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass

from .budget import estimate_tokens

log = logging.getLogger(__name__)

EXACT = "exact"
HEURISTIC = "heuristic"


@dataclass(frozen=True)
class Usage:
    input_tokens: int
    output_tokens: int
    source: str

    @property
    def total(self) -> int:
        return self.input_tokens + self.output_tokens


def _usage_fields(usage) -> tuple[int | None, int | None]:
    if not isinstance(usage, dict):
        return None, None
    inp = usage.get("input_tokens", usage.get("prompt_tokens"))
    out = usage.get("output_tokens", usage.get("completion_tokens"))
    return (int(inp) if inp is not None else None,
            int(out) if out is not None else None)


class SSEUsageTracker:
    """Incremental SSE parser that picks usage out of a stream as it passes.

    Anthropic streams carry input tokens in ``message_start`` and the final
    output count in ``message_delta``; OpenAI streams put a ``usage`` object
    on their last chunk.  Chunks are inspected, never held back.
    """

    def __init__(self):
        self._buf = b""
        self._data: list[bytes] = []
        self.input_tokens: int | None = None
        self.output_tokens: int | None = None
        self.chars = 0
        self.malformed = 0

    def feed(self, chunk: bytes) -> None:
        self.chars += len(chunk)
        self._buf += chunk
        while True:
            nl = self._buf.find(b"\n")
            if nl < 0:
                break
            line = self._buf[:nl].rstrip(b"\r")
            self._buf = self._buf[nl + 1:]
            self._line(line)

    def close(self) -> None:
        if self._buf:
            self._line(self._buf.rstrip(b"\r"))
            self._buf = b""
        self._dispatch()

    def _line(self, line: bytes) -> None:
        if not line:
            self._dispatch()
        elif line.startswith(b"data:"):
            self._data.append(line[5:].lstrip(b" "))

    def _dispatch(self) -> None:
        if not self._data:
            return
        payload = b"\n".join(self._data)
        self._data = []
        if payload.strip() == b"[DONE]":
            return
        try:
            event = json.loads(payload)
        except ValueError:
            self.malformed += 1
            return
        if not isinstance(event, dict):
            return
        kind = event.get("type")
        if kind == "message_start":
            inp, out = _usage_fields((event.get("message") or {}).get("usage"))
            if inp is not None:
                self.input_tokens = inp
            if out is not None and self.output_tokens is None:
                self.output_tokens = out
        elif kind == "message_delta":
            _, out = _usage_fields(event.get("usage"))
            if out is not None:
                self.output_tokens = out
        elif "usage" in event:
            inp, out = _usage_fields(event.get("usage"))
            if inp is not None:
                self.input_tokens = inp
            if out is not None:
                self.output_tokens = out

    def usage(self) -> Usage:
        if self.input_tokens is None and self.output_tokens is None:
            return Usage(0, estimate_tokens(self.chars), HEURISTIC)
        return Usage(self.input_tokens or 0, self.output_tokens or 0, EXACT)


def extract_tokens(body: bytes, *, streaming: bool = False) -> Usage:
    """Usage from a complete response body (JSON or buffered SSE)."""
    if streaming:
        t = SSEUsageTracker()
        t.feed(body)
        t.close()
        return t.usage()
    try:
        doc = json.loads(body)
    except ValueError:
        log.debug("non-JSON response body, using heuristic")
        return Usage(0, estimate_tokens(len(body)), HEURISTIC)
    inp, out = _usage_fields(doc.get("usage") if isinstance(doc, dict) else None)
    if inp is None and out is None:
        return Usage(0, estimate_tokens(len(body)), HEURISTIC)
    return Usage(inp or 0, out or 0, EXACT)
