import asyncio
import math
import random

import pytest

from hivemind.admission import AdmissionGate, DoubleRelease, GateClosed

pytestmark = pytest.mark.asyncio


async def settle(n: int = 5):
    for _ in range(n):
        await asyncio.sleep(0)


async def park(gate: AdmissionGate, n: int) -> list[asyncio.Task]:
    tasks = [asyncio.create_task(gate.acquire()) for _ in range(n)]
    await settle()
    return tasks


async def fill(gate: AdmissionGate, n: int):
    return [await gate.acquire() for _ in range(n)]


async def test_admits_immediately_when_below_limit():
    gate = AdmissionGate(5)
    guard = await gate.acquire()
    assert gate.active == 1
    guard.release()
    assert gate.active == 0


async def test_blocks_at_limit_until_release():
    gate = AdmissionGate(5)
    guards = await fill(gate, 5)
    [waiter] = await park(gate, 1)
    assert not waiter.done() and gate.waiters == 1
    guards[0].release()
    await settle()
    assert waiter.done()
    assert gate.active == 5


@pytest.mark.parametrize("limit", [5.0, 5.5, 5.9, 6.0])
async def test_fractional_limit_is_floored(limit):
    gate = AdmissionGate(limit)
    await fill(gate, 5)
    [waiter] = await park(gate, 1)
    # oracle: a sixth request fits only when floor(limit) >= 6
    assert waiter.done() == (math.floor(limit) >= 6)
    waiter.cancel()
    await settle()


async def test_release_wakes_exactly_one_waiter():
    gate = AdmissionGate(5)
    guards = await fill(gate, 5)
    waiters = await park(gate, 3)
    guards[0].release()
    await settle()
    assert [w.done() for w in waiters] == [True, False, False]
    assert gate.active == 5 and gate.waiters == 2
    for w in waiters[1:]:
        w.cancel()
    await settle()


async def test_release_without_waiters():
    gate = AdmissionGate(5)
    g = await gate.acquire()
    g.release()
    assert gate.active == 0 and gate.waiters == 0


async def test_double_release_faults():
    gate = AdmissionGate(5)
    g = await gate.acquire()
    g.release()
    with pytest.raises(DoubleRelease):
        g.release()
    assert gate.active == 0


@pytest.mark.parametrize("n_waiters", range(0, 7))
async def test_resize_up_admits_what_fits(n_waiters):
    gate = AdmissionGate(5)
    await fill(gate, 5)
    waiters = await park(gate, n_waiters)
    gate.set_max_concurrency(8)
    await settle()
    expected = min(n_waiters, 8 - 5)
    assert sum(w.done() for w in waiters) == expected
    assert gate.active == 5 + expected
    assert gate.waiters == n_waiters - expected
    # FIFO: the earliest waiters are the ones admitted
    assert [w.done() for w in waiters] == [i < expected for i in range(n_waiters)]
    for w in waiters:
        w.cancel()
    await settle()


async def test_resize_down_never_evicts():
    gate = AdmissionGate(8)
    guards = await fill(gate, 6)
    gate.set_max_concurrency(2)
    assert gate.active == 6
    [waiter] = await park(gate, 1)
    for g in guards[:4]:
        g.release()
        await settle()
        assert not waiter.done()
    assert gate.active == 2
    guards[4].release()
    await settle()
    assert waiter.done() and gate.active == 2


async def test_resize_identity_is_noop():
    gate = AdmissionGate(5)
    await fill(gate, 5)
    waiters = await park(gate, 2)
    gate.set_max_concurrency(5)
    await settle()
    assert gate.active == 5 and gate.waiters == 2
    for w in waiters:
        w.cancel()
    await settle()


async def test_resize_below_one_clamps():
    gate = AdmissionGate(5)
    gate.set_max_concurrency(0.3)
    assert gate.max_concurrency == 1.0
    assert gate.clamp_warnings == 1


async def test_shutdown_fails_waiters_and_new_acquires():
    gate = AdmissionGate(1)
    g = await gate.acquire()
    [waiter] = await park(gate, 1)
    gate.shutdown()
    await settle()
    with pytest.raises(GateClosed):
        waiter.result()
    with pytest.raises(GateClosed):
        await gate.acquire()
    g.release()
    assert gate.active == 0


async def test_cancelled_waiter_leaves_no_trace():
    gate = AdmissionGate(1)
    g = await gate.acquire()
    [waiter] = await park(gate, 1)
    waiter.cancel()
    await settle()
    g.release()
    assert gate.active == 0 and gate.waiters == 0


async def test_guard_released_from_another_task():
    gate = AdmissionGate(1)
    g = await gate.acquire()

    async def other():
        g.release()

    await asyncio.create_task(other())
    assert gate.active == 0


async def test_disabled_gate_never_blocks():
    gate = AdmissionGate(1, enabled=False)
    guards = await fill(gate, 10)
    assert gate.active == 10
    for g in guards:
        g.release()


def instrument(gate: AdmissionGate, violations: list):
    """Check the limit at the exact instant of every admission."""
    orig_admit, orig_wake = gate._admit, gate._wake

    def admit():
        guard = orig_admit()
        if gate.enabled and gate.active > gate.limit:
            violations.append((gate.active, gate.max_concurrency))
        return guard

    def wake():
        before = gate.active
        orig_wake()
        if gate.active > before and gate.active > gate.limit:
            violations.append((gate.active, gate.max_concurrency))

    gate._admit, gate._wake = admit, wake


async def test_randomized_stress_never_exceeds_limit():
    rng = random.Random(7)
    gate = AdmissionGate(5)
    violations: list = []
    instrument(gate, violations)
    ops_left = [10_000]

    async def worker():
        while ops_left[0] > 0:
            ops_left[0] -= 1
            if rng.random() < 0.05:
                gate.set_max_concurrency(rng.uniform(0.5, 12.0))
            guard = await gate.acquire()
            for _ in range(rng.randrange(3)):
                await asyncio.sleep(0)
            guard.release()

    async def resizer():
        while ops_left[0] > 0:
            gate.set_max_concurrency(rng.uniform(1.0, 10.0))
            await asyncio.sleep(0)

    await asyncio.wait_for(asyncio.gather(*(worker() for _ in range(64)), resizer()), 60)
    assert violations == []
    assert gate.active == 0
    assert gate.waiters == 0


async def test_liveness_with_fixed_limit():
    rng = random.Random(3)
    for limit in (1, 2, 3, 7):
        gate = AdmissionGate(limit)
        done = []

        async def job(i):
            async with await gate.acquire():
                for _ in range(rng.randrange(4)):
                    await asyncio.sleep(0)
            done.append(i)

        await asyncio.wait_for(asyncio.gather(*(job(i) for i in range(50))), 10)
        assert sorted(done) == list(range(50))
        assert gate.active == 0
