"""Scenario runner: N agents against the mock, directly or through the proxy.

An agent makes sequential multi-turn calls and dies on the first error it
sees.  Runs are compressed in time by ``time_scale``: every duration in the
mock and the proxy (rate window, latency, cooldowns, backoff) is multiplied
by it, so a 60 s rate window at scale 0.05 lasts 3 s of wall time.
"""

from __future__ import annotations

import asyncio
import csv
import json
import logging
import random
import statistics
import tempfile
import time
from dataclasses import asdict, dataclass, field, fields, replace
from importlib import resources
from pathlib import Path

import aiohttp

from .budget import AGENT_HEADER
from .config import ProxySettings
from .mock_upstream import MockConfig, MockUpstream
from .proxy import Proxy
from .tokens import SSEUsageTracker, extract_tokens

log = logging.getLogger(__name__)

ABLATIONS = {
    "full": (),
    "no-admission": ("admission",),
    "no-ratelimit": ("ratelimit",),
    "no-backpressure": ("backpressure",),
    "no-retry": ("retry",),
    "admission-only": ("ratelimit", "backpressure", "retry"),
}
ABLATABLE = ("admission", "ratelimit", "backpressure", "retry")

# $ per million tokens
PRICES = {"haiku": 0.80, "sonnet": 3.00, "opus": 15.00}

CSV_COLUMNS = ["scenario", "mode", "agents", "alive", "dead", "failure_pct",
               "wasted_tokens", "wall_time_s"]


@dataclass
class ScenarioSpec:
    name: str
    agents: int
    turns: int = 3
    rpm_limit: int = 50
    p_502: float = 0.0
    p_reset: float = 0.0
    base_latency_ms: float = 1000.0
    jitter_ms: float = 500.0
    spike_period_s: float | None = None
    spike_magnitude_ms: float = 0.0
    spike_duration_s: float | None = None
    max_connections: int = 5
    stagger_s: float = 0.0
    prompt_chars: int = 2000
    stream: bool = False
    mode: str = "proxy"
    ablation: tuple[str, ...] = ()
    repetitions: int = 5
    seed: int = 0
    time_scale: float = 0.05
    proxy_overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.agents < 1:
            raise ValueError("agents must be >= 1")
        if self.mode not in ("direct", "proxy"):
            raise ValueError(f"mode must be direct or proxy, got {self.mode!r}")
        self.ablation = tuple(sorted(set(self.ablation)))
        for a in self.ablation:
            if a not in ABLATABLE:
                raise ValueError(f"unknown primitive in ablation: {a!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioSpec":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})

    def mock_config(self, seed: int) -> MockConfig:
        k = self.time_scale
        return MockConfig(
            rpm_limit=self.rpm_limit, window_s=60.0 * k, p_502=self.p_502, p_reset=self.p_reset,
            base_latency_ms=self.base_latency_ms * k, jitter_ms=self.jitter_ms * k,
            spike_period_s=self.spike_period_s * k if self.spike_period_s else None,
            spike_magnitude_ms=self.spike_magnitude_ms * k,
            spike_duration_s=self.spike_duration_s * k if self.spike_duration_s else None,
            max_connections=self.max_connections, seed=seed)

    def proxy_settings(self, upstream: str, checkpoint_dir: str) -> ProxySettings:
        return ProxySettings(upstream=upstream, port=0, disabled=list(self.ablation),
                             time_scale=self.time_scale, overrides=dict(self.proxy_overrides),
                             checkpoint_dir=checkpoint_dir)


def preset_names() -> list[str]:
    return sorted(p.name[:-5] for p in resources.files("hivemind.scenarios").iterdir()
                  if p.name.endswith(".json"))


def load_preset(name: str, **overrides) -> ScenarioSpec:
    path = resources.files("hivemind.scenarios") / f"{name}.json"
    if not path.is_file():
        raise KeyError(f"unknown scenario {name!r}; known: {', '.join(preset_names())}")
    d = json.loads(path.read_text())
    d.update({k: v for k, v in overrides.items() if v is not None})
    return ScenarioSpec.from_dict(d)


@dataclass
class AgentOutcome:
    agent_id: str
    alive: bool
    turns_completed: int
    tokens: int
    error: str | None = None


@dataclass
class RunReport:
    scenario: str
    mode: str
    agents: int
    alive: int
    dead: int
    failure_pct: float
    wasted_tokens: int
    wall_time_s: float
    seed: int = 0
    ablation: tuple[str, ...] = ()
    total_tokens: int = 0
    outcomes: list[AgentOutcome] = field(default_factory=list)
    mock_stats: dict = field(default_factory=dict)
    proxy_metrics: dict = field(default_factory=dict)
    slot_leak: int = 0

    @classmethod
    def from_outcomes(cls, spec: ScenarioSpec, outcomes: list[AgentOutcome], wall: float,
                      seed: int, **extra) -> "RunReport":
        dead = sum(1 for o in outcomes if not o.alive)
        return cls(
            scenario=spec.name, mode=spec.mode, agents=len(outcomes),
            alive=len(outcomes) - dead, dead=dead,
            failure_pct=100.0 * dead / len(outcomes),
            wasted_tokens=sum(o.tokens for o in outcomes if not o.alive),
            wall_time_s=wall, seed=seed, ablation=spec.ablation,
            total_tokens=sum(o.tokens for o in outcomes), outcomes=outcomes, **extra)

    def consistent(self) -> bool:
        dead = sum(1 for o in self.outcomes if not o.alive)
        return (self.alive + self.dead == self.agents == len(self.outcomes)
                and dead == self.dead
                and abs(self.failure_pct - 100.0 * dead / self.agents) < 1e-9
                and self.wasted_tokens == sum(o.tokens for o in self.outcomes if not o.alive))

    def csv_row(self) -> dict:
        return {"scenario": self.scenario, "mode": self.mode, "agents": self.agents,
                "alive": self.alive, "dead": self.dead,
                "failure_pct": round(self.failure_pct, 2),
                "wasted_tokens": self.wasted_tokens,
                "wall_time_s": round(self.wall_time_s, 3)}


@dataclass
class ScenarioResult:
    spec: ScenarioSpec
    runs: list[RunReport]

    def _stat(self, attr: str) -> dict:
        vals = [getattr(r, attr) for r in self.runs]
        return {"mean": statistics.fmean(vals), "min": min(vals), "max": max(vals)}

    @property
    def failure_pct(self) -> float:
        return statistics.fmean(r.failure_pct for r in self.runs)

    @property
    def wasted_tokens(self) -> float:
        return statistics.fmean(r.wasted_tokens for r in self.runs)

    @property
    def alive(self) -> float:
        return statistics.fmean(r.alive for r in self.runs)

    def summary(self) -> dict:
        return {"scenario": self.spec.name, "mode": self.spec.mode,
                "ablation": list(self.spec.ablation), "agents": self.spec.agents,
                "repetitions": len(self.runs),
                "failure_pct": self._stat("failure_pct"),
                "alive": self._stat("alive"),
                "wasted_tokens": self._stat("wasted_tokens"),
                "wall_time_s": self._stat("wall_time_s")}


def _conversation(agent_id: str, turn: int, prompt_chars: int, history: list[str],
                  stream: bool) -> dict:
    messages = []
    for i, reply in enumerate(history):
        messages.append({"role": "user", "content": f"turn {i}"})
        messages.append({"role": "assistant", "content": reply})
    task = (f"[{agent_id}] step {turn}: " + "refactor the module and run the tests. " * 64)
    messages.append({"role": "user", "content": task[:prompt_chars]})
    return {"model": "mock-model", "max_tokens": 1024, "messages": messages, "stream": stream}


async def run_agent(agent_id: str, turns: int, url: str, *, prompt_chars: int = 2000,
                    stream: bool = False, start_delay_s: float = 0.0,
                    timeout_s: float = 300.0) -> AgentOutcome:
    """Sequential multi-turn session; the first failure is fatal."""
    if start_delay_s > 0:
        await asyncio.sleep(start_delay_s)
    tokens = 0
    history: list[str] = []
    timeout = aiohttp.ClientTimeout(total=timeout_s)
    async with aiohttp.ClientSession(timeout=timeout) as session:
        for turn in range(turns):
            payload = _conversation(agent_id, turn, prompt_chars, history, stream)
            try:
                async with session.post(url, json=payload,
                                        headers={AGENT_HEADER: agent_id}) as resp:
                    body = await resp.read()
                    if resp.status != 200:
                        return AgentOutcome(agent_id, False, turn, tokens, f"http {resp.status}")
            except (aiohttp.ClientError, asyncio.TimeoutError, ConnectionError) as exc:
                return AgentOutcome(agent_id, False, turn, tokens, type(exc).__name__)
            if stream:
                tracker = SSEUsageTracker()
                tracker.feed(body)
                tracker.close()
                usage = tracker.usage()
            else:
                usage = extract_tokens(body)
            tokens += usage.total
            history.append(_reply_text(body, stream))
    return AgentOutcome(agent_id, True, turns, tokens)


def _reply_text(body: bytes, stream: bool) -> str:
    if stream:
        return "(streamed reply)"
    try:
        doc = json.loads(body)
        return doc["content"][0]["text"]
    except (ValueError, KeyError, IndexError, TypeError):
        return ""


def derive_seeds(seed: int, n: int) -> list[int]:
    rng = random.Random(seed)
    return [rng.randrange(2 ** 31) for _ in range(n)]


async def run_once(spec: ScenarioSpec, seed: int) -> RunReport:
    mock = MockUpstream(spec.mock_config(seed))
    await mock.start()
    proxy = None
    tmp = tempfile.TemporaryDirectory(prefix="hivemind-ckpt-")
    try:
        if spec.mode == "proxy":
            proxy = Proxy(spec.proxy_settings(mock.url, tmp.name))
            port = await proxy.start("127.0.0.1", 0)
            target = f"http://127.0.0.1:{port}/v1/messages"
        else:
            target = f"{mock.url}/v1/messages"
        rng = random.Random(seed ^ 0x5EED)
        delays = [rng.uniform(0.0, spec.stagger_s * spec.time_scale) for _ in range(spec.agents)]
        timeout_s = max(60.0, 3600.0 * spec.time_scale)
        t0 = time.monotonic()
        outcomes = await asyncio.gather(*(
            run_agent(f"agent-{i:03d}", spec.turns, target, prompt_chars=spec.prompt_chars,
                      stream=spec.stream, start_delay_s=delays[i], timeout_s=timeout_s)
            for i in range(spec.agents)))
        wall = time.monotonic() - t0
        extra = {"mock_stats": {k: v for k, v in mock.stats().items() if k != "statuses"}}
        if proxy is not None:
            metrics = proxy.metrics_snapshot()
            extra["proxy_metrics"] = {"gauges": metrics["gauges"], "counters": metrics["counters"]}
            extra["slot_leak"] = proxy.admission.active
        return RunReport.from_outcomes(spec, list(outcomes), wall, seed, **extra)
    finally:
        if proxy is not None:
            await proxy.stop()
        await mock.stop()
        tmp.cleanup()


async def run_scenario_async(spec: ScenarioSpec) -> ScenarioResult:
    runs = []
    for i, seed in enumerate(derive_seeds(spec.seed, spec.repetitions)):
        report = await run_once(spec, seed)
        log.info("%s [%s%s] rep %d: %d/%d dead (%.1f%%), wasted %d, %.2fs",
                 spec.name, spec.mode, "".join(f" -{a}" for a in spec.ablation), i,
                 report.dead, report.agents, report.failure_pct, report.wasted_tokens,
                 report.wall_time_s)
        runs.append(report)
    return ScenarioResult(spec, runs)


def run_scenario(spec: ScenarioSpec) -> ScenarioResult:
    return asyncio.run(run_scenario_async(spec))


def run_compare(spec: ScenarioSpec) -> list[ScenarioResult]:
    """Direct first, then proxied, with identical seeds."""
    return [run_scenario(replace(spec, mode="direct", ablation=())),
            run_scenario(replace(spec, mode="proxy"))]


def run_ablation(base: ScenarioSpec) -> list[tuple[str, ScenarioResult]]:
    table = []
    for label, disabled in ABLATIONS.items():
        result = run_scenario(replace(base, mode="proxy", ablation=disabled))
        table.append((label, result))
    return table


def cost_report(direct_wasted: float, proxied_wasted: float, prices: dict | None = None,
                runs_per_day: int = 10) -> list[dict]:
    """Daily cost of wasted tokens per price tier and the relative saving."""
    rows = []
    for tier, price in (prices or PRICES).items():
        direct = direct_wasted * price / 1e6 * runs_per_day
        hm = proxied_wasted * price / 1e6 * runs_per_day
        savings = (1.0 - hm / direct) if direct > 0 else 0.0
        rows.append({"tier": tier, "price_per_m": price, "direct_per_day": direct,
                     "proxied_per_day": hm, "savings": savings})
    return rows


def write_reports(results: list[ScenarioResult], out: str | Path) -> Path:
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if out.suffix == ".csv":
        with out.open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
            w.writeheader()
            for res in results:
                for run in res.runs:
                    w.writerow(run.csv_row())
    else:
        doc = {"results": [{"summary": r.summary(),
                            "runs": [asdict(run) for run in r.runs]} for r in results]}
        out.write_text(json.dumps(doc, indent=2, default=list))
    return out
