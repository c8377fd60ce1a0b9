"""Command line: ``bridgebench {validate,run,sweep,report}``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import config as config_mod
from . import runner
from .bridge import plan_deployment
from .errors import BridgeBenchError, ConfigInvalid


def _load(args) -> config_mod.ScenarioConfig:
    if args.config and args.profile:
        raise ConfigInvalid("use either --config or --profile, not both")
    if args.config:
        cfg = config_mod.load(args.config)
    else:
        cfg = config_mod.load_preset(args.profile or "desk")
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "repetitions", None) is not None:
        overrides["repetitions"] = args.repetitions
    for name in ("aut", "qos", "topic_scheme"):
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = value
    return cfg.replace(**overrides) if overrides else cfg


def _out_dir(args, cfg) -> str:
    out = args.out or cfg.output_dir
    if not out:
        raise ConfigInvalid("no output directory: pass --out or set output_dir")
    return out


def cmd_validate(args) -> int:
    cfg = _load(args)
    plan = plan_deployment(cfg.providers, cfg.aut, cfg.topic_scheme, cfg.qos, cfg.republish_mode, cfg.transform)
    print(f"{cfg.name}: ok (digest {cfg.digest})")
    print(f"  providers={len(cfg.providers)} hubs={sum(len(p.hubs) for p in cfg.providers)} "
          f"messages/repetition={cfg.total_messages} repetitions={cfg.repetitions}")
    print(f"  AUT {cfg.aut}: {len(plan.bridges)} bridge(s), bridge topic size {plan.bridge_topic_bytes} bytes, "
          f"qos {cfg.qos}, {cfg.republish_mode} republish")
    return 0


def cmd_run(args) -> int:
    cfg = _load(args)
    out = _out_dir(args, cfg)
    cell = runner.run(cfg, out, progress=None if args.quiet else print)
    print(runner.summarize(cell), end="")
    print(f"outputs in {out}")
    return runner.exit_status([cell])


def cmd_sweep(args) -> int:
    cfg = _load(args)
    out = _out_dir(args, cfg)
    cells = runner.sweep(cfg, out_dir=out, progress=None if args.quiet else print)
    print(Path(out, "table.txt").read_text(), end="")
    return runner.exit_status(cells)


def cmd_report(args) -> int:
    raw = args.raw_dir or args.out
    if not raw:
        raise ConfigInvalid("report needs a raw directory (positional or --out)")
    table, _ = runner.report(raw)
    print(table, end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bridgebench", description="MQTT bridge architecture benchmark")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def scenario_args(p, with_overrides=True):
        p.add_argument("--config", help="scenario YAML file")
        p.add_argument("--profile", choices=config_mod.preset_names(), help="named preset (default: desk)")
        p.add_argument("--seed", type=int)
        p.add_argument("--repetitions", type=int)
        if with_overrides:
            p.add_argument("--aut", type=int, choices=(1, 2))
            p.add_argument("--qos", type=int, choices=(0, 1, 2))
            p.add_argument("--topic-scheme", dest="topic_scheme", choices=("wildcard-15", "explicit-29"))

    p = sub.add_parser("validate", help="check a scenario and print its deployment plan")
    scenario_args(p)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("run", help="run one configuration for all repetitions")
    scenario_args(p)
    p.add_argument("--out", help="output directory")
    p.add_argument("-q", "--quiet", action="store_true")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="run the 9-cell AUT x topic size x QoS matrix")
    scenario_args(p, with_overrides=False)
    p.add_argument("--out", help="output directory")
    p.add_argument("-q", "--quiet", action="store_true")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="rebuild table.txt and results.json from raw CSVs")
    p.add_argument("raw_dir", nargs="?")
    p.add_argument("--out", help="raw directory (alternative to the positional)")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except BridgeBenchError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
