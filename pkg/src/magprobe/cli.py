"""Command-line entry points: scenario runs, listing, validation, and the
teleoperation service.

Exit codes: 0 ok, 2 acceptance check failed (with --check), 3 run fault.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .experiments import (
    Scenario,
    ScenarioError,
    ScenarioFault,
    builtin_scenarios,
    run_scenario,
    write_outputs,
)

EXIT_OK = 0
EXIT_CHECK_FAILED = 2
EXIT_FAULT = 3


def _load_scenario(ref: str) -> Scenario:
    builtins = builtin_scenarios()
    if ref in builtins:
        return builtins[ref]
    path = Path(ref)
    if not path.exists():
        raise ScenarioError(f"{ref!r} is neither a builtin scenario nor a file")
    return Scenario.from_json(path.read_text())


def _cmd_run(args) -> int:
    scenario = _load_scenario(args.scenario)
    result = run_scenario(
        scenario, duration_scale=args.duration_scale, seed_override=args.seed
    )
    if args.out_dir:
        out = write_outputs(result, args.out_dir)
        print(f"wrote {out}/records.csv and summary.json")
    stats = result.summary["overall"]["position_error"]
    if stats["mean"] is not None:
        print(
            f"{scenario.name}: {result.summary['n_records']} records, "
            f"mean position error {stats['mean'] * 1e3:.2f} mm"
        )
    else:
        print(f"{scenario.name}: no records")
    for name, check in result.checks.items():
        print(f"  [{'PASS' if check['passed'] else 'FAIL'}] {name}: {check['detail']}")
    if args.check and not result.passed:
        return EXIT_CHECK_FAILED
    return EXIT_OK


def _cmd_list(_args) -> int:
    for name, scn in builtin_scenarios().items():
        print(f"{name}: kind={scn.kind}, seeds={scn.seeds}, duration={scn.duration_s}s")
    return EXIT_OK


def _cmd_validate(args) -> int:
    try:
        scn = Scenario.from_json(Path(args.file).read_text())
    except (OSError, json.JSONDecodeError, ScenarioError, ValueError) as exc:
        print(f"invalid scenario: {exc}", file=sys.stderr)
        return EXIT_FAULT
    print(f"ok: {scn.name} ({scn.kind})")
    return EXIT_OK


def _cmd_serve(args) -> int:
    from .teleop import serve

    scenario = _load_scenario(args.scenario)
    serve(scenario, host=args.host, port=args.port, state_rate=args.state_rate)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="magprobe",
        description="Magnetic probe manipulation toolkit: scenario runs and teleoperation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a builtin or JSON scenario")
    p_run.add_argument("scenario", help="builtin name or path to a scenario JSON")
    p_run.add_argument("--seed", type=int, default=None, help="override the seed list")
    p_run.add_argument("--out-dir", default=None, help="directory for CSV/JSON outputs")
    p_run.add_argument(
        "--duration-scale", type=float, default=1.0, help="scale scenario duration"
    )
    p_run.add_argument(
        "--check", action="store_true", help="exit 2 if acceptance checks fail"
    )
    p_run.set_defaults(func=_cmd_run)

    p_list = sub.add_parser("list", help="list builtin scenarios")
    p_list.set_defaults(func=_cmd_list)

    p_val = sub.add_parser("validate", help="validate a scenario JSON file")
    p_val.add_argument("file")
    p_val.set_defaults(func=_cmd_validate)

    p_serve = sub.add_parser("serve", help="run the live teleoperation service")
    p_serve.add_argument("--scenario", default="straightline_tracking")
    p_serve.add_argument("--host", default="127.0.0.1")
    p_serve.add_argument("--port", type=int, default=8720)
    p_serve.add_argument("--state-rate", type=float, default=20.0)
    p_serve.set_defaults(func=_cmd_serve)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ScenarioFault as exc:
        print(f"fault: {exc}", file=sys.stderr)
        return EXIT_FAULT
    except ScenarioError as exc:
        print(f"scenario error: {exc}", file=sys.stderr)
        return EXIT_FAULT


if __name__ == "__main__":
    sys.exit(main())
