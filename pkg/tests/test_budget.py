import json
import math
import random
from fractions import Fraction

import pytest

from hivemind.budget import (AGENT_HEADER, BudgetExhausted, BudgetManager, PoolExhausted,
                             Status, derive_agent_id, estimate_tokens)


def test_below_warning_stays_active():
    m = BudgetManager()
    m.register("a", 100_000)
    assert m.record_usage("a", 80_000, 4_000) is Status.ACTIVE
    assert m.warning_percent("a") is None


def test_exact_85_percent_warns():
    m = BudgetManager()
    m.register("a", 100_000)
    assert m.record_usage("a", 84_999, 0) is Status.ACTIVE
    assert m.record_usage("a", 0, 1) is Status.WARNED
    assert m.warning_percent("a") == 85


def test_exact_ceiling_kills_and_checkpoints(tmp_path):
    m = BudgetManager(checkpoint_dir=tmp_path)
    m.register("agent/7", 100_000)
    m.record_usage("agent/7", 60_000, 39_999)
    assert m.agents["agent/7"].status is Status.WARNED
    assert m.record_usage("agent/7", 0, 1, {"path": "/v1/messages"}) is Status.KILLED
    path = m.agents["agent/7"].checkpoint_path
    record = json.loads(open(path).read())
    assert record["agent_id"] == "agent/7"
    assert record["used_input"] + record["used_output"] == 100_000
    assert record["last_request"] == {"path": "/v1/messages"}
    assert m.kills == 1


def oracle_status(used, ceiling):
    if used >= ceiling:
        return Status.KILLED
    if used >= math.ceil(Fraction(85, 100) * ceiling):
        return Status.WARNED
    return Status.ACTIVE


@pytest.mark.parametrize("seed", range(5))
def test_thresholds_trigger_at_exact_counts(seed):
    rng = random.Random(seed)
    for _ in range(200):
        ceiling = rng.randint(1, 500_000)
        warn_at = math.ceil(Fraction(85, 100) * ceiling)
        m = BudgetManager(pool_total=10**9)
        m.register("x", ceiling)
        # walk through the interesting counts, each reached from below
        used = 0
        for target in sorted({warn_at - 1, warn_at, ceiling - 1, ceiling}):
            if target <= used:
                continue
            status = m.record_usage("x", target - used, 0)
            used = target
            assert status is oracle_status(used, ceiling)
            if status is Status.KILLED:
                break


def test_killed_agent_is_denied():
    m = BudgetManager()
    m.register("a", 10)
    assert m.admit("a").allow
    m.record_usage("a", 10, 0)
    v = m.admit("a")
    assert not v.allow and v.reason == "budget exhausted"
    with pytest.raises(BudgetExhausted):
        m.record_usage("a", 1, 0)


def test_unseen_agent_registered_with_default_ceiling():
    m = BudgetManager(pool_total=1_000, max_agents=4)
    assert m.admit("fresh").allow
    assert m.agents["fresh"].ceiling == 250


def test_pool_over_allocation_denied():
    m = BudgetManager(pool_total=1_000, max_agents=2)
    assert m.admit("a").allow and m.admit("b").allow
    v = m.admit("c")
    assert not v.allow
    with pytest.raises(PoolExhausted):
        m.register("d", 1)


def test_disabled_manager_allows_all():
    m = BudgetManager(pool_total=1, max_agents=1, enabled=False)
    assert all(m.admit(str(i)).allow for i in range(5))


@pytest.mark.parametrize("chars,tokens", [(400, 100), (0, 0), (401, 101), (1, 1), (3, 1)])
def test_estimate_tokens(chars, tokens):
    assert estimate_tokens(chars) == tokens


def test_agent_id_derivation():
    assert derive_agent_id({AGENT_HEADER.upper(): "w1"}, "1.2.3.4") == "w1"
    a = derive_agent_id({"x-api-key": "k1"}, "1.2.3.4")
    assert a == derive_agent_id({"X-Api-Key": "k1"}, "1.2.3.4")
    assert a != derive_agent_id({"x-api-key": "k2"}, "1.2.3.4")
    assert a.startswith("anon-")
