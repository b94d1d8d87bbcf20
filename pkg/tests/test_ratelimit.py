import asyncio
import random

import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import FakeClock
from hivemind.providers import BY_NAME
from hivemind.ratelimit import (HeaderState, Infeasible, RateLimiter, SlidingWindow,
                                format_seconds, observe_headers, parse_duration,
                                pause_threshold)

WINDOW = 60.0


def oracle_admit(history: list[tuple[float, int]], arrival: float, weight: int,
                 limit: int) -> float:
    """Earliest t >= arrival where the trailing-window sum plus weight fits.

    Only the arrival itself and expiry instants of past entries can be the
    answer, so checking those candidates by brute force is exact.
    """
    def fits(t):
        used = sum(w for ts, w in history if ts <= t < ts + WINDOW)
        return used + weight <= limit

    candidates = sorted({arrival} | {ts + WINDOW for ts, _ in history if ts + WINDOW > arrival})
    for t in candidates:
        if fits(t):
            return t
    raise AssertionError("no candidate fits")


def trailing_sums_ok(history, limit):
    for t, _ in history:
        if sum(w for ts, w in history if ts <= t < ts + WINDOW) > limit:
            return False
    return True


def run(coro):
    return asyncio.run(coro)


def test_boundary_49_entries_admits_immediately(clock):
    w = SlidingWindow(50, clock=clock, sleep=clock.sleep)
    for _ in range(49):
        w.record(clock(), 1)
    t = run(w.wait_if_throttled(1))
    assert t == clock() and w.occupancy() == 50
    assert clock.sleeps == []


def test_full_window_waits_for_oldest_expiry(clock):
    w = SlidingWindow(50, clock=clock, sleep=clock.sleep)
    t0 = clock()
    for i in range(50):
        w.record(t0 + i * 0.1, 1)
    clock.advance(10)
    t = run(w.wait_if_throttled(1))
    assert t == pytest.approx(t0 + 60)
    assert t == oracle_admit([(t0 + i * 0.1, 1) for i in range(50)], t0 + 10, 1, 50)


def test_overweight_is_infeasible(clock):
    w = SlidingWindow(50, clock=clock, sleep=clock.sleep)
    with pytest.raises(Infeasible):
        run(w.wait_if_throttled(51))


def test_entry_at_exact_horizon_is_expired(clock):
    w = SlidingWindow(1, clock=clock, sleep=clock.sleep)
    w.record(clock(), 1)
    clock.advance(60)
    assert w.occupancy() == 0


@pytest.mark.parametrize("seed", range(40))
def test_random_traces_match_oracle(seed):
    rng = random.Random(seed)
    limit = rng.choice([1, 2, 3, 5, 10, 50])
    weighted = seed % 2 == 1
    clock_ = FakeClock(0.0)
    w = SlidingWindow(limit, clock=clock_, sleep=clock_.sleep)
    history: list[tuple[float, int]] = []
    arrival = 0.0
    for _ in range(rng.randrange(20, 120)):
        arrival += rng.choice([0.0, 0.0, rng.uniform(0, 5), rng.uniform(0, 40)])
        arrival = round(arrival, 3)
        weight = rng.randint(1, limit) if weighted else 1
        clock_.now = max(clock_.now, arrival)
        expected = oracle_admit(history, clock_.now, weight, limit)
        got = run(w.wait_if_throttled(weight))
        assert got == pytest.approx(expected, abs=1e-9)
        history.append((got, weight))
        assert trailing_sums_ok(history, limit)
        # pruning never drops unexpired weight
        assert w.occupancy() == sum(x for ts, x in history if ts + WINDOW > clock_.now)


def test_correct_adjusts_weight(clock):
    w = SlidingWindow(1000, clock=clock, sleep=clock.sleep)
    e = w.record(clock(), 100)
    w.correct(e, 40)
    assert w.occupancy() == 40
    clock.advance(61)
    w.correct(e, 500)  # already expired: total untouched
    assert w.occupancy() == 0


def test_global_pause_delays_both_requests(clock):
    lim = RateLimiter.build(50, 100_000, clock=clock, sleep=clock.sleep)
    until = clock() + 5
    lim.global_pause(until)

    async def two():
        await lim.wait_if_throttled(10)
        a = clock()
        await lim.wait_if_throttled(10)
        return a, clock()

    a, b = run(two())
    assert a >= until and b >= until


def test_global_pause_in_past_and_max_semantics(clock):
    lim = RateLimiter.build(50, 100_000, clock=clock, sleep=clock.sleep)
    lim.global_pause(clock() - 3)
    run(lim.wait_if_throttled(1))
    assert clock.sleeps == []
    lim.global_pause(clock() + 9)
    lim.global_pause(clock() + 4)
    assert lim.pause_until == clock() + 9


def test_tpm_window_blocks_on_tokens(clock):
    lim = RateLimiter.build(100, 1000, clock=clock, sleep=clock.sleep)
    start = clock()
    run(lim.wait_if_throttled(800))
    run(lim.wait_if_throttled(300))
    assert clock() == pytest.approx(start + 60)


def test_disabled_limiter_never_blocks(clock):
    lim = RateLimiter.build(1, 1, clock=clock, sleep=clock.sleep, enabled=False)
    for _ in range(5):
        assert run(lim.wait_if_throttled(10)) is None
    assert clock.sleeps == []


ANTHROPIC = BY_NAME["anthropic"]
OPENAI = BY_NAME["openai"]
OLLAMA = BY_NAME["ollama"]


def test_header_pause_with_retry_after():
    hs = HeaderState()
    d = observe_headers(hs, {"anthropic-ratelimit-requests-remaining": "1",
                             "anthropic-ratelimit-requests-limit": "50",
                             "retry-after": "7"}, ANTHROPIC, now=0.0)
    assert d.pause and d.duration_s == 7
    assert hs.remaining_requests == 1 and hs.limit_requests == 50


def test_header_far_above_threshold():
    d = observe_headers(HeaderState(), {"anthropic-ratelimit-requests-remaining": "40",
                                        "anthropic-ratelimit-requests-limit": "50"},
                        ANTHROPIC, now=0.0)
    assert not d.pause


def test_no_headers_leaves_state_unchanged():
    hs = HeaderState()
    d = observe_headers(hs, {"content-type": "application/json"}, OLLAMA, now=0.0)
    assert not d.pause
    assert hs == HeaderState()


def test_header_names_are_case_insensitive():
    d = observe_headers(HeaderState(), {"X-RateLimit-Remaining-Requests": "2",
                                        "X-RateLimit-Limit-Requests": "20",
                                        "X-RateLimit-Reset-Requests": "1.5s"},
                        OPENAI, now=0.0)
    assert d.pause and d.duration_s == pytest.approx(1.5)


def test_unparseable_header_counts_failure():
    hs = HeaderState()
    d = observe_headers(hs, {"anthropic-ratelimit-requests-remaining": "lots"},
                        ANTHROPIC, now=0.0)
    assert not d.pause and hs.parse_failures == 1


def test_default_pause_when_no_duration():
    d = observe_headers(HeaderState(), {"anthropic-ratelimit-requests-remaining": "0",
                                        "anthropic-ratelimit-requests-limit": "50"},
                        ANTHROPIC, now=0.0)
    assert d.pause and d.duration_s == 1.0


def test_reset_timestamp_gives_duration():
    d = observe_headers(HeaderState(), {"anthropic-ratelimit-requests-remaining": "0",
                                        "anthropic-ratelimit-requests-limit": "50",
                                        "anthropic-ratelimit-requests-reset": "2026-01-01T00:00:30Z"},
                        ANTHROPIC, now=0.0, now_wall=1767225600.0)
    assert d.duration_s == pytest.approx(30)


@pytest.mark.parametrize("limit,expected", [(1, 2), (20, 2), (21, 3), (50, 5), (1000, 100)])
def test_pause_threshold(limit, expected):
    assert pause_threshold(limit) == expected


@pytest.mark.parametrize("raw,secs", [("7", 7.0), ("0.25", 0.25), ("6m0s", 360.0),
                                      ("250ms", 0.25), ("1h2m3s", 3723.0), ("junk", None)])
def test_parse_duration(raw, secs):
    assert parse_duration(raw) == secs


@pytest.mark.parametrize("x,s", [(7, "7"), (0.25, "0.25"), (1.5, "1.5"), (0, "0"), (0.0001, "0.001")])
def test_format_seconds(x, s):
    assert format_seconds(x) == s


def test_limiter_applies_header_pause(clock):
    lim = RateLimiter.build(50, 100_000, clock=clock, sleep=clock.sleep)
    lim.on_response_headers({"anthropic-ratelimit-requests-remaining": "1",
                             "anthropic-ratelimit-requests-limit": "50",
                             "retry-after": "7"}, ANTHROPIC)
    assert lim.pause_until == clock() + 7 and lim.pauses == 1


@given(st.floats(min_value=0, max_value=86_400, allow_nan=False))
def test_format_then_parse_rounds_up_to_the_millisecond(x):
    back = parse_duration(format_seconds(x))
    assert x - 1e-9 <= back < x + 0.001 + 1e-9
