"""Per-agent token ceilings drawn from a global pool.

Agents are warned at 85% of their ceiling and checkpointed then killed once
usage reaches it, much like an out-of-memory killer.
"""

from __future__ import annotations

import enum
import hashlib
import json
import math
from fractions import Fraction
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

AGENT_HEADER = "x-hivemind-agent-id"
WARNING_HEADER = "x-hivemind-budget-warning"


class Status(str, enum.Enum):
    ACTIVE = "active"
    WARNED = "warned"
    KILLED = "killed"


class BudgetExhausted(RuntimeError):
    pass


class PoolExhausted(RuntimeError):
    pass


def estimate_tokens(body_chars: int) -> int:
    """Heuristic of one token per four characters, rounded up."""
    return -(-max(0, body_chars) // 4)


@dataclass
class AgentBudget:
    agent_id: str
    ceiling: int
    used_input: int = 0
    used_output: int = 0
    status: Status = Status.ACTIVE
    checkpoint_path: str | None = None

    @property
    def used(self) -> int:
        return self.used_input + self.used_output

    @property
    def utilisation(self) -> float:
        return self.used / self.ceiling


@dataclass(frozen=True)
class Verdict:
    allow: bool
    reason: str = ""


@dataclass
class BudgetManager:
    pool_total: int = 10_000_000
    max_agents: int = 50
    warn_fraction: float = 0.85
    checkpoint_dir: Path | None = None
    enabled: bool = True
    agents: dict[str, AgentBudget] = field(default_factory=dict)
    allocated: int = 0
    kills: int = 0

    @property
    def _warn_ratio(self) -> Fraction:
        # exact rational so 85% of 100 000 is 85 000 and not a float neighbour
        return Fraction(self.warn_fraction).limit_denominator(10_000)

    @property
    def default_ceiling(self) -> int:
        return self.pool_total // self.max_agents

    def register(self, agent_id: str, ceiling: int | None = None) -> AgentBudget:
        if agent_id in self.agents:
            return self.agents[agent_id]
        ceiling = self.default_ceiling if ceiling is None else int(ceiling)
        if ceiling < 1:
            raise ValueError("ceiling must be positive")
        if self.allocated + ceiling > self.pool_total:
            raise PoolExhausted(
                f"cannot allocate {ceiling} tokens: {self.pool_total - self.allocated} left in pool")
        self.allocated += ceiling
        b = AgentBudget(agent_id, ceiling)
        self.agents[agent_id] = b
        return b

    def admit(self, agent_id: str) -> Verdict:
        if not self.enabled:
            return Verdict(True)
        try:
            b = self.register(agent_id)
        except PoolExhausted as exc:
            return Verdict(False, str(exc))
        if b.status is Status.KILLED:
            return Verdict(False, "budget exhausted")
        return Verdict(True)

    def record_usage(self, agent_id: str, input_tokens: int, output_tokens: int,
                     meta: dict | None = None) -> Status:
        b = self.agents.get(agent_id) or self.register(agent_id)
        if b.status is Status.KILLED:
            raise BudgetExhausted(f"agent {agent_id} already killed")
        b.used_input += max(0, int(input_tokens))
        b.used_output += max(0, int(output_tokens))
        if b.used >= b.ceiling:
            b.status = Status.KILLED
            self.kills += 1
            b.checkpoint_path = self._checkpoint(b, meta)
        elif b.used >= self._warn_ratio * b.ceiling:
            b.status = Status.WARNED
        return b.status

    def warning_percent(self, agent_id: str) -> int | None:
        b = self.agents.get(agent_id)
        if b is None or b.status is Status.ACTIVE:
            return None
        return min(100, math.floor(100 * b.utilisation))

    def _checkpoint(self, b: AgentBudget, meta: dict | None) -> str | None:
        if self.checkpoint_dir is None:
            return None
        d = Path(self.checkpoint_dir)
        d.mkdir(parents=True, exist_ok=True)
        safe = hashlib.sha1(b.agent_id.encode()).hexdigest()[:12]
        path = d / f"{safe}.json"
        record = asdict(b)
        record["status"] = b.status.value
        record["timestamp"] = time.time()
        record["last_request"] = meta or {}
        path.write_text(json.dumps(record, indent=2))
        return str(path)

    def snapshot(self) -> dict:
        return {
            "pool_total": self.pool_total,
            "allocated": self.allocated,
            "budget_kills": self.kills,
            "agents": {
                a: {"input": b.used_input, "output": b.used_output,
                    "ceiling": b.ceiling, "status": b.status.value}
                for a, b in self.agents.items()
            },
        }


def derive_agent_id(headers, peer: str | None) -> str:
    """Explicit agent header wins; otherwise hash client address and key."""
    lowered = {k.lower(): v for k, v in headers.items()}
    explicit = lowered.get(AGENT_HEADER)
    if explicit:
        return explicit
    key = lowered.get("x-api-key") or lowered.get("authorization") or ""
    digest = hashlib.sha256(f"{peer or ''}|{key}".encode()).hexdigest()
    return f"anon-{digest[:16]}"
