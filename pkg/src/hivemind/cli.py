"""``hivemind`` command line: proxy, mock and eval subcommands.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import asyncio
import json
import logging
import sys
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .config import PRIMITIVES, ProxySettings, load_file
from .harness import (ABLATABLE, ABLATIONS, ScenarioSpec, cost_report, load_preset,
                      preset_names, run_ablation, run_compare, run_scenario, write_reports)
from .mock_upstream import MockConfig
from .providers import ConfigError

log = logging.getLogger("hivemind")

DEFAULT_CONFIG = "hivemind.toml"


class UsageError(Exception):
    pass


@dataclass
class RuntimeConfig:
    subcommand: str
    proxy: ProxySettings | None = None
    mock: MockConfig | None = None
    mock_host: str = "127.0.0.1"
    mock_port: int = 9000
    eval: ScenarioSpec | None = None
    compare: bool = False
    ablation_table: bool = False
    out: str | None = None
    print_config: bool = False

    def to_dict(self) -> dict:
        if self.subcommand == "proxy":
            d = self.proxy.to_dict()
            d["profile"] = self.proxy.profile().to_dict()
            return d
        if self.subcommand == "mock":
            return {"mock": {**asdict(self.mock), "host": self.mock_host,
                             "port": self.mock_port}}
        return {"eval": {**asdict(self.eval), "ablation": list(self.eval.ablation)}}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hivemind", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="subcommand", required=True, parser_class=_Parser)

    p = sub.add_parser("proxy", help="run the scheduling proxy")
    p.add_argument("--config")
    p.add_argument("--upstream")
    p.add_argument("--host")
    p.add_argument("--port", type=int)
    p.add_argument("--rpm", type=int)
    p.add_argument("--tpm", type=int)
    p.add_argument("--max-concurrency", type=int)
    p.add_argument("--l-target-ms", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--max-attempts", type=int)
    p.add_argument("--pool-total", type=int)
    p.add_argument("--max-agents", type=int)
    p.add_argument("--checkpoint-dir")
    p.add_argument("--time-scale", type=float)
    p.add_argument("--disable", action="append", choices=PRIMITIVES, default=None)
    p.add_argument("--print-config", action="store_true")

    m = sub.add_parser("mock", help="run the mock LLM API")
    m.add_argument("--config")
    m.add_argument("--host")
    m.add_argument("--port", type=int)
    m.add_argument("--rpm", type=int)
    m.add_argument("--p502", type=float)
    m.add_argument("--p-reset", type=float)
    m.add_argument("--preset", help="take rate/error/latency settings from a scenario")
    m.add_argument("--latency", help="BASE_MS[:JITTER_MS]")
    m.add_argument("--spike", help="PERIOD_S:MAGNITUDE_MS[:DURATION_S]")
    m.add_argument("--format", choices=("anthropic", "openai"))
    m.add_argument("--max-connections", type=int)
    m.add_argument("--window-s", type=float)
    m.add_argument("--seed", type=int)
    m.add_argument("--print-config", action="store_true")

    e = sub.add_parser("eval", help="run evaluation scenarios")
    e.add_argument("--config")
    e.add_argument("--scenario", help=f"one of: {', '.join(preset_names())}")
    e.add_argument("--mode", choices=("direct", "proxy"))
    e.add_argument("--compare", action="store_true", help="direct mode first, then proxied")
    e.add_argument("--ablation", help="comma list of primitives to disable, or 'table'")
    e.add_argument("--reps", type=int)
    e.add_argument("--seed", type=int)
    e.add_argument("--time-scale", type=float)
    e.add_argument("--out")
    e.add_argument("--list", action="store_true", help="list scenario presets")
    e.add_argument("--print-config", action="store_true")
    return parser


def _file_doc(path: str | None) -> dict:
    if path is None:
        if Path(DEFAULT_CONFIG).is_file():
            path = DEFAULT_CONFIG
        else:
            return {}
    try:
        return load_file(path)
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}")
    except ValueError as exc:
        raise UsageError(f"cannot parse config file {path}: {exc}")


def _proxy_config(args, doc: dict) -> ProxySettings:
    s = ProxySettings.from_dict(doc)
    flags = {
        "upstream": args.upstream, "host": args.host, "port": args.port,
        "max_attempts": args.max_attempts, "pool_total": args.pool_total,
        "max_agents": args.max_agents, "checkpoint_dir": args.checkpoint_dir,
        "time_scale": args.time_scale,
    }
    for k, v in flags.items():
        if v is not None:
            setattr(s, k, v)
    if args.disable:
        s.disabled = sorted(set(args.disable))
    for k in ("rpm", "tpm", "max_concurrency", "l_target_ms", "alpha", "beta"):
        v = getattr(args, k)
        if v is not None:
            s.overrides[k] = v
    return s.validate()


def _mock_config(args, doc: dict) -> tuple[MockConfig, str, int]:
    section = dict(doc.get("mock", {}))
    host = section.pop("host", "127.0.0.1")
    port = section.pop("port", 9000)
    base = asdict(MockConfig())
    if args.preset:
        spec = load_preset(args.preset)
        base.update(asdict(spec.mock_config(0)))
        base.update({"window_s": 60.0, "base_latency_ms": spec.base_latency_ms,
                     "jitter_ms": spec.jitter_ms, "spike_period_s": spec.spike_period_s,
                     "spike_magnitude_ms": spec.spike_magnitude_ms,
                     "spike_duration_s": spec.spike_duration_s, "seed": spec.seed})
    base.update(section)
    flags = {"rpm_limit": args.rpm, "p_502": args.p502, "p_reset": args.p_reset,
             "format": args.format, "max_connections": args.max_connections,
             "window_s": args.window_s, "seed": args.seed}
    base.update({k: v for k, v in flags.items() if v is not None})
    if args.latency:
        parts = args.latency.split(":")
        try:
            base["base_latency_ms"] = float(parts[0])
            if len(parts) > 1:
                base["jitter_ms"] = float(parts[1])
        except ValueError:
            raise ConfigError("latency", f"expected BASE_MS[:JITTER_MS], got {args.latency!r}")
    if args.spike:
        parts = args.spike.split(":")
        try:
            base["spike_period_s"] = float(parts[0])
            base["spike_magnitude_ms"] = float(parts[1])
            if len(parts) > 2:
                base["spike_duration_s"] = float(parts[2])
        except (ValueError, IndexError):
            raise ConfigError("spike", f"expected PERIOD_S:MAGNITUDE_MS[:DURATION_S], got {args.spike!r}")
    if base["rpm_limit"] < 1:
        raise ConfigError("rpm", f"must be positive, got {base['rpm_limit']}")
    if args.port is not None:
        port = args.port
    if args.host is not None:
        host = args.host
    try:
        cfg = MockConfig.from_dict(base)
    except (TypeError, ValueError) as exc:
        raise ConfigError("mock", str(exc))
    return cfg, host, port


def _eval_config(args, doc: dict) -> tuple[ScenarioSpec, bool]:
    section = dict(doc.get("eval", {}))
    name = args.scenario or section.get("name")
    if not name:
        raise UsageError("eval needs --scenario (see --list)")
    try:
        spec = load_preset(name)
    except KeyError as exc:
        raise ConfigError("scenario", str(exc.args[0]))
    known = {f.name for f in fields(ScenarioSpec)}
    section = {k: (tuple(v) if k == "ablation" else v) for k, v in section.items() if k in known}
    table = False
    flags = {"mode": args.mode, "repetitions": args.reps, "seed": args.seed,
             "time_scale": args.time_scale}
    if args.ablation:
        if args.ablation == "table":
            table = True
        else:
            parts = tuple(a for a in args.ablation.split(",") if a)
            for a in parts:
                if a not in ABLATABLE:
                    raise ConfigError("ablation", f"unknown primitive {a!r}")
            flags["ablation"] = parts
    try:
        spec = replace(spec, **section)
        spec = replace(spec, **{k: v for k, v in flags.items() if v is not None})
    except (TypeError, ValueError) as exc:
        raise ConfigError("eval", str(exc))
    if spec.repetitions < 1:
        raise ConfigError("reps", "must be >= 1")
    if spec.time_scale <= 0:
        raise ConfigError("time_scale", "must be positive")
    return spec, table


def parse_and_validate(argv: list[str] | None = None) -> RuntimeConfig:
    args = build_parser().parse_args(argv)
    if args.subcommand == "eval" and args.list:
        return RuntimeConfig("list")
    doc = _file_doc(args.config)
    if args.subcommand == "proxy":
        return RuntimeConfig("proxy", proxy=_proxy_config(args, doc),
                             print_config=args.print_config)
    if args.subcommand == "mock":
        cfg, host, port = _mock_config(args, doc)
        return RuntimeConfig("mock", mock=cfg, mock_host=host, mock_port=port,
                             print_config=args.print_config)
    spec, table = _eval_config(args, doc)
    return RuntimeConfig("eval", eval=spec, compare=args.compare, ablation_table=table,
                         out=args.out, print_config=args.print_config)


def _print_results(results) -> None:
    for res in results:
        s = res.summary()
        abl = ",".join(s["ablation"]) or "-"
        print(f"{s['scenario']:<14} {s['mode']:<6} ablation={abl:<28} "
              f"fail={s['failure_pct']['mean']:6.1f}% "
              f"[{s['failure_pct']['min']:.1f}, {s['failure_pct']['max']:.1f}]  "
              f"alive={s['alive']['mean']:.1f}/{s['agents']}  "
              f"wasted={s['wasted_tokens']['mean']:.0f}  wall={s['wall_time_s']['mean']:.2f}s")


def run(cfg: RuntimeConfig) -> int:
    if cfg.subcommand == "list":
        for name in preset_names():
            print(name)
        return 0
    if cfg.print_config:
        print(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
        return 0
    if cfg.subcommand == "proxy":
        from .proxy import serve
        asyncio.run(serve(cfg.proxy))
        return 0
    if cfg.subcommand == "mock":
        from .mock_upstream import serve
        asyncio.run(serve(cfg.mock, cfg.mock_host, cfg.mock_port))
        return 0

    spec = cfg.eval
    if cfg.ablation_table:
        table = run_ablation(spec)
        for label, res in table:
            print(f"{label:<16} fail={res.failure_pct:6.1f}%  alive={res.alive:.1f}/{spec.agents}")
        results = [res for _, res in table]
    elif cfg.compare:
        results = run_compare(spec)
        _print_results(results)
        direct, proxied = results
        for row in cost_report(direct.wasted_tokens, proxied.wasted_tokens):
            print(f"  {row['tier']:<7} ${row['price_per_m']:.2f}/M  direct ${row['direct_per_day']:.4f}/day"
                  f"  proxied ${row['proxied_per_day']:.4f}/day  savings {100 * row['savings']:.0f}%")
    else:
        results = [run_scenario(spec)]
        _print_results(results)
    if cfg.out:
        print(f"wrote {write_reports(results, cfg.out)}")
    return 0


def main(argv: list[str] | None = None) -> int:
    try:
        cfg = parse_and_validate(argv)
    except UsageError as exc:
        print(f"hivemind: usage error: {exc}", file=sys.stderr)
        return 2
    except ConfigError as exc:
        print(f"hivemind: invalid configuration: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if "-v" in (argv or sys.argv) else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return run(cfg)
    except KeyboardInterrupt:
        return 0
    except Exception as exc:  # noqa: BLE001
        log.exception("fatal: %s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
