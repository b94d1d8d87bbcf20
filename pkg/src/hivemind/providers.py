"""Provider profiles and upstream URL detection."""

from __future__ import annotations

import dataclasses
import re
from dataclasses import dataclass, field
from urllib.parse import urlsplit

ANTHROPIC_HEADERS = {
    "requests_remaining": ("anthropic-ratelimit-requests-remaining",),
    "requests_limit": ("anthropic-ratelimit-requests-limit",),
    "requests_reset": ("anthropic-ratelimit-requests-reset",),
    "tokens_remaining": ("anthropic-ratelimit-tokens-remaining",),
    "tokens_limit": ("anthropic-ratelimit-tokens-limit",),
    "retry_after": ("retry-after",),
}
OPENAI_HEADERS = {
    "requests_remaining": ("x-ratelimit-remaining-requests",),
    "requests_limit": ("x-ratelimit-limit-requests",),
    "requests_reset": ("x-ratelimit-reset-requests",),
    "tokens_remaining": ("x-ratelimit-remaining-tokens",),
    "tokens_limit": ("x-ratelimit-limit-tokens",),
    "retry_after": ("retry-after",),
}
# unknown upstreams: accept either header family
GENERIC_HEADERS = {
    role: ANTHROPIC_HEADERS[role] + OPENAI_HEADERS[role]
    for role in ANTHROPIC_HEADERS if role != "retry_after"
}
GENERIC_HEADERS["retry_after"] = ("retry-after",)

DEFAULT_RETRYABLE = (429, 502, 503, 529)


@dataclass(frozen=True)
class ProviderProfile:
    name: str
    rpm: int
    tpm: int
    max_concurrency: int
    l_target_ms: int
    alpha: float = 0.5
    beta: float = 0.5
    header_names: dict = field(default_factory=dict, hash=False, compare=True)
    retryable_statuses: tuple[int, ...] = DEFAULT_RETRYABLE
    auth_header: str = "authorization"
    url_patterns: tuple[str, ...] = ()

    def matches(self, url: str) -> bool:
        return any(re.search(p, url, re.IGNORECASE) for p in self.url_patterns)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["header_names"] = {k: list(v) for k, v in self.header_names.items()}
        d["retryable_statuses"] = list(self.retryable_statuses)
        d["url_patterns"] = list(self.url_patterns)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ProviderProfile":
        d = dict(d)
        d["header_names"] = {k: tuple(v) if not isinstance(v, str) else (v,)
                             for k, v in d.get("header_names", {}).items()}
        d["retryable_statuses"] = tuple(d.get("retryable_statuses", DEFAULT_RETRYABLE))
        d["url_patterns"] = tuple(d.get("url_patterns", ()))
        return cls(**d)


PROFILES: tuple[ProviderProfile, ...] = (
    ProviderProfile("anthropic", 50, 80_000, 5, 3000,
                    header_names=ANTHROPIC_HEADERS, auth_header="x-api-key",
                    retryable_statuses=(429, 502, 503, 529),
                    url_patterns=(r"^https?://api\.anthropic\.com",)),
    ProviderProfile("openai", 60, 150_000, 10, 2000,
                    header_names=OPENAI_HEADERS,
                    url_patterns=(r"^https?://api\.openai\.com",)),
    ProviderProfile("azure_openai", 60, 120_000, 10, 3000,
                    header_names=OPENAI_HEADERS, auth_header="api-key",
                    url_patterns=(r"^https?://[^/]+\.openai\.azure\.com",)),
    ProviderProfile("google_ai", 60, 100_000, 8, 2000,
                    header_names={"retry_after": ("retry-after",)},
                    auth_header="x-goog-api-key",
                    url_patterns=(r"^https?://generativelanguage\.googleapis\.com",)),
    ProviderProfile("ollama", 1000, 10_000_000, 2, 10_000, beta=0.7,
                    header_names={},
                    url_patterns=(r"^https?://[^/]*:11434(/|$)", r"^https?://[^/]*ollama")),
    ProviderProfile("generic", 60, 100_000, 5, 2000,
                    header_names=GENERIC_HEADERS),
)

BY_NAME = {p.name: p for p in PROFILES}
GENERIC = BY_NAME["generic"]

OVERRIDABLE = ("rpm", "tpm", "max_concurrency", "l_target_ms", "alpha", "beta")


class ConfigError(ValueError):
    """Invalid user configuration; names the offending field."""

    def __init__(self, field_name: str, message: str):
        self.field = field_name
        super().__init__(f"{field_name}: {message}")


def detect(upstream_url: str, profiles=PROFILES) -> ProviderProfile:
    parts = urlsplit(upstream_url)
    if not parts.scheme or not parts.netloc:
        raise ConfigError("upstream", f"not an absolute URL: {upstream_url!r}")
    for p in profiles:
        if p.url_patterns and p.matches(upstream_url):
            return p
    return GENERIC


def validate_overrides(overrides: dict) -> dict:
    clean = {}
    for k, v in (overrides or {}).items():
        if v is None:
            continue
        if k not in OVERRIDABLE:
            raise ConfigError(k, "not an overridable profile field")
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ConfigError(k, f"expected a number, got {v!r}")
        if v <= 0:
            raise ConfigError(k, f"must be positive, got {v}")
        if k == "beta" and v >= 1:
            raise ConfigError(k, "must be below 1")
        if k in ("rpm", "tpm", "max_concurrency", "l_target_ms") and v != int(v):
            raise ConfigError(k, "must be an integer")
        clean[k] = int(v) if k in ("rpm", "tpm", "max_concurrency", "l_target_ms") else float(v)
    return clean


def apply_profile(profile: ProviderProfile, overrides: dict | None = None) -> ProviderProfile:
    """Field-wise merge; explicit overrides win."""
    return dataclasses.replace(profile, **validate_overrides(overrides or {}))
