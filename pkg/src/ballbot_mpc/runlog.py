"""Run log files: one CSV of per-step rows plus one JSON sidecar.

The CSV column order is the tuple in :data:`ballbot_mpc.sim.COLUMNS`;
briefly, per row: time, the 16 model coordinates, actual joint rates,
reference position, commanded drive and joint torques, ground-truth wall
forces/normal magnitudes/hand distances/hand speeds, the active refined
and draft plans' next-node force/distance/speed, planar acceleration,
and event/stale/singular flags.

Numbers are written with a fixed locale-independent format, so a
deterministic run produces byte-identical files.  Wall-clock solve times
never enter the CSV; they live in the sidecar, which also carries the
per-solve planner records, event markers, run metadata and any failure
record.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

CSV_NAME = "runlog.csv"
SIDECAR_NAME = "solves.json"

_FLOAT_FMT = "%.12g"


class LogFormatError(ValueError):
    """Raised when stored log files do not match the documented layout."""


@dataclass
class LoadedLog:
    """A run log read back from disk; all metrics derive from this."""

    scenario_name: str
    kind: str
    seed: int
    columns: list
    rows: np.ndarray
    solves: list
    events: list
    meta: dict
    failure: dict | None

    def col(self, name: str) -> np.ndarray:
        try:
            return self.rows[:, self.columns.index(name)]
        except ValueError:
            raise LogFormatError(f"column '{name}' not in log") from None

    @property
    def times(self) -> np.ndarray:
        return self.col("t")


def save(log, out_dir) -> tuple:
    """Write runlog.csv and solves.json under ``out_dir``; return paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / CSV_NAME
    with open(csv_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(log.columns) + "\n")
        for row in log.rows:
            fh.write(",".join(_FLOAT_FMT % v for v in row) + "\n")
    sidecar = {
        "scenario": log.scenario_name,
        "kind": log.kind,
        "seed": log.seed,
        "meta": log.meta,
        "events": log.events,
        "failure": log.failure,
        "solves": log.solves,
    }
    json_path = out / SIDECAR_NAME
    with open(json_path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(sidecar, fh, indent=1)
        fh.write("\n")
    return csv_path, json_path


def load(path) -> LoadedLog:
    """Read a log back from a directory or from the CSV path itself."""
    path = Path(path)
    if path.is_dir():
        csv_path, json_path = path / CSV_NAME, path / SIDECAR_NAME
    else:
        csv_path, json_path = path, path.with_name(SIDECAR_NAME)
    if not csv_path.exists():
        raise LogFormatError(f"no run log at {csv_path}")
    with open(csv_path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if not header or header[0].isdigit() or header[0] == "-":
            raise LogFormatError(f"{csv_path} has no header row")
        columns = header.split(",")
        rows = np.loadtxt(fh, delimiter=",", ndmin=2)
    if rows.size and rows.shape[1] != len(columns):
        raise LogFormatError(
            f"{csv_path}: {rows.shape[1]} fields per row, "
            f"{len(columns)} columns in header")
    if not json_path.exists():
        raise LogFormatError(f"missing sidecar {json_path}")
    with open(json_path, "r", encoding="utf-8") as fh:
        sidecar = json.load(fh)
    for key in ("scenario", "kind", "seed", "meta", "events", "solves"):
        if key not in sidecar:
            raise LogFormatError(f"sidecar missing '{key}'")
    return LoadedLog(
        scenario_name=sidecar["scenario"], kind=sidecar["kind"],
        seed=int(sidecar["seed"]), columns=columns, rows=rows,
        solves=sidecar["solves"], events=sidecar["events"],
        meta=sidecar["meta"], failure=sidecar.get("failure"))
