"""Command line front end: run scenarios, validate configs, redo metrics.

Exit codes: 0 on success, 1 for anything wrong with the inputs (unreadable
file, schema violation, malformed log), 2 when the simulation itself fails
at runtime (divergence, controller error).  A run writes three artifacts
into the output directory: runlog.csv, solves.json and summary.json.
"""

import argparse
import json
import os
import sys
from pathlib import Path

from . import metrics, runlog, scenario, sim

OUT_DIR_ENV = "BALLBOT_MPC_OUT"
SUMMARY_NAME = "summary.json"


def entry() -> None:
    sys.exit(main(sys.argv[1:]))


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        return args.func(args)
    except OSError as exc:
        name = exc.filename or "file"
        print(f"error: cannot read {name}: {exc.strerror or exc}",
              file=sys.stderr)
        return 1
    except (scenario.ScenarioError, runlog.LogFormatError,
            metrics.MissingLogError, ValueError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ballbot-mpc",
        description="Bi-level contact MPC scenario runner.")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="simulate a scenario and write logs")
    run.add_argument("scenario", help="scenario TOML file")
    run.add_argument("--out", default=None,
                     help="output directory (default: $%s/<name> or "
                          "out/<name>)" % OUT_DIR_ENV)
    run.add_argument("--seed", type=int, default=None,
                     help="override the scenario's noise seed")
    run.add_argument("--deterministic", action="store_true",
                     help="zero wall-clock fields in the artifacts so "
                          "repeat runs are byte-identical")
    run.set_defaults(func=_cmd_run)

    val = sub.add_parser("validate", help="check a scenario file")
    val.add_argument("scenario", help="scenario TOML file")
    val.set_defaults(func=_cmd_validate)

    met = sub.add_parser("metrics",
                         help="recompute summary metrics from a stored log")
    met.add_argument("runlog", help="runlog.csv or its directory")
    met.add_argument("--compare", action="store_true",
                     help="print the draft-versus-refined table per "
                          "contact interval instead of the summary")
    met.add_argument("--out", default=None,
                     help="also write summary.json into this directory")
    met.set_defaults(func=_cmd_metrics)
    return parser


def _cmd_run(args) -> int:
    scn = scenario.load(args.scenario)
    scn.validate()
    log = sim.run_scenario(scn, seed=args.seed)
    if args.deterministic:
        _strip_wall_times(log)
    out_dir = Path(args.out) if args.out else _default_out(scn.name)
    csv_path, _ = runlog.save(log, out_dir)
    loaded = runlog.load(csv_path)
    text = _summary_text(metrics.compute(loaded))
    (out_dir / SUMMARY_NAME).write_text(text)
    if log.failure is not None:
        print("runtime failure at t=%.3f: %s"
              % (log.failure["time"], log.failure["reason"]),
              file=sys.stderr)
        print(f"partial log written to {out_dir}", file=sys.stderr)
        return 2
    print("wrote %s: %d steps, %d draft + %d refined solves"
          % (out_dir, len(log.rows), log.meta["draft_solves"],
             log.meta["refine_solves"]))
    return 0


def _cmd_validate(args) -> int:
    scn = scenario.load(args.scenario)
    scn.validate()
    print(f"ok: {scn.name} ({scn.kind}, {scn.duration:g} s)")
    return 0


def _cmd_metrics(args) -> int:
    log = runlog.load(args.runlog)
    if args.compare:
        sys.stdout.write(_json_text(metrics.compare_levels(log)))
        return 0
    text = _summary_text(metrics.compute(log))
    sys.stdout.write(text)
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / SUMMARY_NAME).write_text(text)
    return 0


def _default_out(name: str) -> Path:
    base = os.environ.get(OUT_DIR_ENV, "out")
    return Path(base) / name


def _summary_text(summary: metrics.SummaryMetrics) -> str:
    return _json_text(summary.to_dict())


def _json_text(payload) -> str:
    # repr-based float formatting: shortest round trip, locale independent.
    return json.dumps(payload, indent=1, sort_keys=True) + "\n"


def _strip_wall_times(log) -> None:
    """Blank host-timing fields; they are the only run-to-run variance."""
    for record in log.solves:
        record["wall_ms"] = 0.0
    log.meta.update(warmup_seconds=0.0, loop_seconds=0.0,
                    mean_draft_ms=0.0, mean_refine_ms=0.0)
