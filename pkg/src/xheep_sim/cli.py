"""Command-line entry point: ``xheep-sim {validate,run,sweep,trace}``.

Exit codes: 0 clean run, 1 the simulation recorded a fault, 2 bad
invocation or an invalid scenario.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from .errors import ConfigurationError
from .power import load_calibration
from .scenario import ScenarioError, ValidationIssue, load_scenario, run_scenario
from .sweep import AXES, sweep, write_csv

EXIT_OK, EXIT_FAULT, EXIT_USAGE = 0, 1, 2


def _load(args):
    scn = load_scenario(args.scenario)
    if getattr(args, "calibration", None):
        scn.platform = replace(scn.platform, calibration=load_calibration(args.calibration))
    return scn


def _issues_json(issues) -> str:
    return json.dumps({"valid": False, "errors": [i.to_dict() for i in issues]}, indent=2)


def cmd_validate(args) -> int:
    _load(args)
    print(json.dumps({"valid": True, "errors": []}))
    return EXIT_OK


def _summary(report) -> str:
    lines = [f"scenario {report.scenario}: {report.total_cycles} cycles, "
             f"{report.wall_time_s:.6g} s, {report.total_energy_j:.6g} J, "
             f"{report.average_power_w * 1e6:.4g} uW average"]
    for p in report.phases:
        lines.append(f"  {p['name']:<16} {p['cycles']:>12} cycles {p['wall_time_s']:>12.6g} s "
                     f"{p['average_power_w'] * 1e6:>12.4f} uW")
    if report.truncated:
        lines.append("  (truncated by a cycle limit)")
    for e in report.events:
        if e["kind"] in ("cpu-trap", "dma-error", "cgra-error", "deadlock"):
            lines.append(f"  fault at cycle {e['cycle']}: {e['kind']} ({e['source']}) {e.get('detail', '')}")
    return "\n".join(lines)


def cmd_run(args) -> int:
    scn = _load(args)
    if args.json:
        scn.report_json = str(Path(args.json).resolve())
    if args.csv:
        scn.report_csv = str(Path(args.csv).resolve())
    if args.trace:
        scn.trace_csv = str(Path(args.trace).resolve())
        scn.platform = replace(scn.platform, trace=True)
    result = run_scenario(scn, fast_forward=not args.no_fast_forward)
    if not args.quiet:
        print(_summary(result.report))
    return EXIT_FAULT if result.faulted else EXIT_OK


def cmd_trace(args) -> int:
    scn = _load(args)
    scn.trace_csv = str(Path(args.out).resolve())
    scn.report_json = scn.report_csv = None
    scn.platform = replace(scn.platform, trace=True)
    result = run_scenario(scn)
    print(f"wrote {len(result.platform.bus.trace)} transactions to {args.out}")
    return EXIT_FAULT if result.faulted else EXIT_OK


def cmd_sweep(args) -> int:
    scn = _load(args)
    values = [v for v in (args.values or "").split(",") if v.strip()]
    rows = sweep(scn, args.axis, values, jobs=args.jobs)
    text = write_csv(rows, args.out)
    if not args.out:
        sys.stdout.write(text)
    return EXIT_FAULT if any(r["faulted"] is True for r in rows) else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="xheep-sim", description="X-HEEP platform performance and energy simulator")
    sub = ap.add_subparsers(dest="command", required=True)

    def scenario_cmd(name, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("scenario", help="scenario file, or the name of a shipped scenario")
        p.add_argument("--calibration", help="calibration file overriding the shipped table")
        return p

    scenario_cmd("validate", "check a scenario and list every problem")
    p = scenario_cmd("run", "run a scenario and write its energy report")
    p.add_argument("--json", help="energy report JSON path")
    p.add_argument("--csv", help="domain x phase energy CSV path")
    p.add_argument("--trace", help="also write the bus transaction trace CSV")
    p.add_argument("--no-fast-forward", action="store_true", help="step every cycle")
    p.add_argument("-q", "--quiet", action="store_true")
    p = scenario_cmd("trace", "run a scenario and write its bus transaction trace")
    p.add_argument("--out", required=True, help="trace CSV path")
    p = scenario_cmd("sweep", "run one simulation per value of a platform axis")
    p.add_argument("--axis", required=True, choices=AXES)
    p.add_argument("--values", required=True,
                   help="comma-separated values, e.g. 1,2,4 or one-at-a-time,fully-connected "
                        "or '0.8 V @ 170 MHz,1.2 V @ 470 MHz'")
    p.add_argument("--out", help="CSV path (default: stdout)")
    p.add_argument("--jobs", type=int, default=1)
    return ap


COMMANDS = {"validate": cmd_validate, "run": cmd_run, "trace": cmd_trace, "sweep": cmd_sweep}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ScenarioError as exc:
        print(_issues_json(exc.issues))
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(_issues_json([ValidationIssue(str(exc.filename or args.scenario), "no such file")]))
        return EXIT_USAGE
    except ConfigurationError as exc:
        print(_issues_json([ValidationIssue(args.command, str(exc))]))
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
