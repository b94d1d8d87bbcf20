"""Proxy runtime settings and config-file loading.

Precedence, lowest to highest: built-in defaults, detected provider profile,
config file, command-line flags.  Config files are TOML or JSON with the
sections below; ``--print-config`` emits JSON that loads back unchanged.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .providers import ConfigError, ProviderProfile, apply_profile, detect, validate_overrides

PRIMITIVES = ("admission", "ratelimit", "backpressure", "retry", "budget")

# config-file section -> settings fields it may set
SECTIONS = {
    "proxy": ("host", "port", "upstream", "disabled", "time_scale"),
    "ratelimit": ("window_s", "pause_floor", "pause_fraction", "default_pause_s"),
    "backpressure": ("c_min", "latency_window", "error_window", "tau", "t_cool_s",
                     "update_min_samples", "update_min_interval_s"),
    "retry": ("d_base_s", "d_max_s", "max_attempts"),
    "budget": ("pool_total", "max_agents", "warn_fraction", "checkpoint_dir"),
}
# durations stretched or shrunk by time_scale
SCALED = ("window_s", "default_pause_s", "t_cool_s", "update_min_interval_s",
          "d_base_s", "d_max_s")


@dataclass
class ProxySettings:
    host: str = "127.0.0.1"
    port: int = 8765
    upstream: str = "https://api.anthropic.com"
    disabled: list[str] = field(default_factory=list)
    time_scale: float = 1.0
    overrides: dict = field(default_factory=dict)

    window_s: float = 60.0
    pause_floor: int = 2
    pause_fraction: float = 0.10
    default_pause_s: float = 1.0

    c_min: float = 1.0
    latency_window: int = 20
    error_window: int = 20
    tau: float = 0.5
    t_cool_s: float = 10.0
    update_min_samples: int = 5
    update_min_interval_s: float = 1.0

    d_base_s: float = 1.0
    d_max_s: float = 30.0
    max_attempts: int = 5

    pool_total: int = 10_000_000
    max_agents: int = 50
    warn_fraction: float = 0.85
    checkpoint_dir: str = "hivemind-checkpoints"

    def enabled(self, primitive: str) -> bool:
        return primitive not in self.disabled

    def profile(self) -> ProviderProfile:
        return apply_profile(detect(self.upstream), self.overrides)

    def seconds(self, name: str) -> float:
        """A duration setting after time scaling."""
        return getattr(self, name) * self.time_scale

    def l_target_ms(self) -> float:
        return self.profile().l_target_ms * self.time_scale

    def validate(self) -> "ProxySettings":
        for name in self.disabled:
            if name not in PRIMITIVES:
                raise ConfigError("disabled", f"unknown primitive {name!r}")
        if not 0 < self.port < 65536 and self.port != 0:
            raise ConfigError("port", f"out of range: {self.port}")
        positive = ("time_scale", "window_s", "default_pause_s", "c_min", "latency_window",
                    "error_window", "t_cool_s", "update_min_samples", "d_base_s", "d_max_s",
                    "max_attempts", "pool_total", "max_agents")
        for name in positive:
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, (int, float)) or v <= 0:
                raise ConfigError(name, f"must be a positive number, got {v!r}")
        for name in ("pause_fraction", "tau", "warn_fraction"):
            v = getattr(self, name)
            if not 0 < v <= 1:
                raise ConfigError(name, f"must lie in (0, 1], got {v!r}")
        if self.d_base_s > self.d_max_s:
            raise ConfigError("d_base_s", "must not exceed d_max_s")
        self.overrides = validate_overrides(self.overrides)
        self.profile()
        return self

    def to_dict(self) -> dict:
        out: dict = {sec: {k: getattr(self, k) for k in keys} for sec, keys in SECTIONS.items()}
        out["proxy"]["disabled"] = list(self.disabled)
        out["overrides"] = dict(self.overrides)
        return out

    @classmethod
    def from_dict(cls, doc: dict, base: "ProxySettings | None" = None) -> "ProxySettings":
        s = dataclasses.replace(base) if base is not None else cls()
        s.disabled = list(s.disabled)
        s.overrides = dict(s.overrides)
        for sec, values in doc.items():
            if sec == "overrides":
                s.overrides.update(values or {})
                continue
            if sec not in SECTIONS:
                continue
            for k, v in (values or {}).items():
                if k not in SECTIONS[sec]:
                    raise ConfigError(f"{sec}.{k}", "unknown setting")
                setattr(s, k, list(v) if k == "disabled" else v)
        return s


def load_file(path: str | Path) -> dict:
    path = Path(path)
    text = path.read_text()
    if path.suffix == ".json":
        return json.loads(text)
    return tomllib.loads(text)
