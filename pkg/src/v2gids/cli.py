"""Command line: generate traces, inject attacks, run the engine, print reports."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import ConfigError, load_config
from .core import MessageKind, PacketParseError
from .datagen import (AttackKind, AttackSpec, CapacityError, IngestionError, read_trace_dir,
                      scenario_from_dict, scenario_to_dict, generate_packet_trace, inject_attack,
                      write_trace_dir)
from .harness import RunReport, ValidationError, run_trace, write_verdicts
from .protocol import DEFAULT_TABLE, TransitionTable

SCENARIO_FILE = "scenario.json"


def attack_kind(name: str) -> AttackKind:
    """Accept ``over_report``, ``OverReport``, ``attack-1`` or ``1``."""
    key = name.strip().lower().replace("-", "_")
    for kind in AttackKind:
        if key in (kind.value, kind.value.replace("_", ""), kind.label.replace("-", "_"),
                   str(kind.table_row)):
            return kind
    raise argparse.ArgumentTypeError(
        f"unknown attack {name!r}; choose from {', '.join(k.value for k in AttackKind)}")


def _periods(trace_dir: Path):
    path = trace_dir / SCENARIO_FILE
    if not path.exists():
        return None
    d = json.loads(path.read_text())
    return {MessageKind(k): int(v) for k, v in d.get("periods_ms", {}).items()}


def cmd_generate(args) -> int:
    spec = json.loads(Path(args.scenario).read_text())
    scenario = scenario_from_dict(spec)
    trace = generate_packet_trace(scenario)
    out = Path(args.out)
    write_trace_dir(trace, out)
    (out / SCENARIO_FILE).write_text(json.dumps(scenario_to_dict(scenario), indent=1) + "\n")
    print(f"wrote {len(trace.packets)} packets, {len(trace.evs)} EVs to {out}")
    return 0


def cmd_inject(args) -> int:
    src = Path(args.trace)
    trace = read_trace_dir(src)
    periods = _periods(src)
    spec = AttackSpec(args.attack, args.count, args.seed, args.magnitude, args.delta)
    trace = inject_attack(trace, spec, periods) if periods else inject_attack(trace, spec)
    out = Path(args.out) if args.out else src
    write_trace_dir(trace, out)
    if out != src and (src / SCENARIO_FILE).exists():
        (out / SCENARIO_FILE).write_text((src / SCENARIO_FILE).read_text())
    print(f"injected {args.count} {spec.kind.label} ({spec.kind.value}) packets into {out}")
    return 0


def cmd_run(args) -> int:
    config = load_config(args.config)
    trace_dir = Path(args.trace)
    trace = read_trace_dir(trace_dir)
    periods = _periods(trace_dir)
    if periods is not None:
        for kind, period in periods.items():
            if config.periods_ms.get(kind) != period:
                raise ValidationError(f"config period for {kind.value} ({config.periods_ms.get(kind)} ms)"
                                      f" differs from the trace's {period} ms")
    table = TransitionTable.from_file(args.table) if args.table else DEFAULT_TABLE
    run = run_trace(trace, config, table)
    report_path = Path(args.report)
    report_path.write_text(run.report.to_json())
    verdicts = Path(args.verdicts) if args.verdicts else report_path.with_suffix(".verdicts.jsonl")
    with open(verdicts, "w") as fh:
        write_verdicts(run.dispositions, fh)
    print(run.report.to_text(), end="")
    return 0


def cmd_report(args) -> int:
    report = RunReport.from_dict(json.loads(Path(args.report).read_text()))
    if args.format == "json":
        print(report.to_json(), end="")
    else:
        print(report.to_text(), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="v2gids", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="synthesize a benign labelled trace")
    p.add_argument("--scenario", required=True, help="scenario JSON file")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("inject", help="inject labelled attack packets into a trace")
    p.add_argument("--trace", required=True, help="trace directory")
    p.add_argument("--attack", required=True, type=attack_kind)
    p.add_argument("--count", required=True, type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--magnitude", type=float, default=1.0, help="power offset in kW")
    p.add_argument("--delta", type=float, default=0.5, help="relative period shift")
    p.add_argument("--out", help="write to this directory instead of in place")
    p.set_defaults(func=cmd_inject)

    p = sub.add_parser("run", help="stream a trace through the engine")
    p.add_argument("--trace", required=True)
    p.add_argument("--config", help="key = value engine config")
    p.add_argument("--report", required=True, help="report JSON to write")
    p.add_argument("--verdicts", help="verdict JSONL (default: next to the report)")
    p.add_argument("--table", help="transition table file (phase, kind, next-phase)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("report", help="print a saved report")
    p.add_argument("--report", default="report.json")
    p.add_argument("--format", choices=("json", "text"), default="text")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValidationError, ConfigError, CapacityError, IngestionError, PacketParseError,
            FileNotFoundError, json.JSONDecodeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
