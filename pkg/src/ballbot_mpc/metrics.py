"""Summary quantities computed from stored run logs.

Everything here derives from the CSV rows and the JSON sidecar; nothing
re-runs physics or planners.  Contact intervals come from the executed
wall forces in the CSV, so "during contact" means the plant really
pressed on a surface.  The draft-versus-refined table instead reads the
per-solve node series stored in the sidecar: each draft plan's scheduled
intervals are evaluated on that draft's own nodes and on the nodes of
the refined solve from the same control tick.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .contact import extract_schedule
from .runlog import LoadedLog

GOAL_TOLERANCE = 0.15  # m, matches the shipped scenarios' reach check


class MissingLogError(ValueError):
    """Raised when a log lacks the records a computation needs."""


@dataclass
class SummaryMetrics:
    """Per-run summary; serialized as summary.json by the CLI."""

    max_penetration_draft: float
    max_penetration_refined: float
    max_slip_draft: float
    max_slip_refined: float
    peak_contact_force: float
    peak_planned_force: float
    peak_acceleration: float
    position_rms: float
    goal_reach_time: float | None
    final_goal_distance: float | None
    min_obstacle_clearance: float | None
    mean_solve_ms_draft: float
    mean_solve_ms_refined: float
    contact_intervals: list

    def to_dict(self) -> dict:
        return asdict(self)


def _stitched(log: LoadedLog, prefix: str) -> tuple:
    """(2, T) planned force/distance/speed series for one level."""
    lam = np.stack([log.col(f"{prefix}_lam1"), log.col(f"{prefix}_lam2")])
    dist = np.stack([log.col(f"{prefix}_d1"), log.col(f"{prefix}_d2")])
    speed = np.stack([log.col(f"{prefix}_s1"), log.col(f"{prefix}_s2")])
    return lam, dist, speed


def contact_intervals(log: LoadedLog, threshold: float = 5.0,
                      min_duration: float = 0.05) -> list:
    """(start, end) spans where the plant pressed on a wall.

    Measured from the executed normal forces, debounced by min_duration
    (a reporting debounce, much shorter than the planner's scheduling
    rule) and merged across arms.
    """
    fn = np.stack([log.col("wall_fn1"), log.col("wall_fn2")])
    schedule = extract_schedule(fn, log.times, threshold=threshold,
                                min_duration=min_duration)
    spans = sorted([iv.t_start, iv.t_end] for iv in schedule.intervals)
    merged: list = []
    for start, end in spans:
        if merged and start <= merged[-1][1] + 1e-9:
            merged[-1][1] = max(merged[-1][1], end)
        else:
            merged.append([start, end])
    return [tuple(iv) for iv in merged]


def _level_stats(lam, dist, speed, mask, threshold: float) -> tuple:
    """(max penetration, max in-contact slip) over the masked steps."""
    dist = np.where(np.isnan(dist), np.inf, dist)[:, mask]
    lam = np.nan_to_num(lam, nan=0.0)[:, mask]
    speed = np.nan_to_num(speed, nan=0.0)[:, mask]
    penetration = float(np.max(np.maximum(-dist, 0.0), initial=0.0))
    in_contact = lam > threshold
    slip = float(np.max(speed[in_contact], initial=0.0)) \
        if in_contact.any() else 0.0
    return penetration, slip


def _solve_ms(log: LoadedLog, level: str) -> float:
    ms = [r["wall_ms"] for r in log.solves if r.get("level") == level]
    return float(np.mean(ms)) if ms else 0.0


def _box_clearance(p_xy, center, size) -> float:
    """Signed 2D distance from a point to a box boundary (negative inside)."""
    q = np.abs(np.asarray(p_xy) - np.asarray(center)) \
        - 0.5 * np.asarray(size)
    outside = np.linalg.norm(np.maximum(q, 0.0))
    return float(outside + min(max(q[0], q[1]), 0.0))


def _obstacle_clearance(log: LoadedLog) -> float | None:
    obstacles = log.meta.get("obstacles") or []
    if not obstacles:
        return None
    spawn_times = [e["applied_at"] for e in log.events
                   if e.get("marker") == "obstacle_spawn"]
    t = log.times
    px, py = log.col("px"), log.col("py")
    worst = np.inf
    for (center, size), spawned in zip(obstacles, spawn_times):
        live = t >= spawned
        for x, y in zip(px[live], py[live]):
            worst = min(worst, _box_clearance((x, y), center, size))
    return float(worst)


def compute(log: LoadedLog, threshold: float = 5.0,
            min_duration: float = 0.05) -> SummaryMetrics:
    """Summarize one run; see SummaryMetrics for field meanings."""
    intervals = contact_intervals(log, threshold, min_duration)
    every = np.ones(len(log.times), dtype=bool)
    pen_ref, slip_ref = _level_stats(*_stitched(log, "plan"), every,
                                     threshold)
    pen_draft, slip_draft = _level_stats(*_stitched(log, "draft"), every,
                                         threshold)
    fn = np.stack([log.col("wall_fn1"), log.col("wall_fn2")])
    accel = np.hypot(log.col("accel_x"), log.col("accel_y"))
    err = np.hypot(log.col("px") - log.col("ref_x"),
                   log.col("py") - log.col("ref_y"))

    goal = log.meta.get("goal")
    reach_time = final_dist = None
    if goal is not None:
        dist_to_goal = np.hypot(log.col("px") - goal[0],
                                log.col("py") - goal[1])
        final_dist = float(dist_to_goal[-1])
        hits = np.flatnonzero(dist_to_goal <= GOAL_TOLERANCE)
        reach_time = float(log.times[hits[0]]) if hits.size else None

    plan_lam = np.nan_to_num(_stitched(log, "plan")[0], nan=0.0)
    return SummaryMetrics(
        max_penetration_draft=pen_draft,
        max_penetration_refined=pen_ref,
        max_slip_draft=slip_draft,
        max_slip_refined=slip_ref,
        peak_contact_force=float(np.max(fn, initial=0.0)),
        peak_planned_force=float(np.max(plan_lam, initial=0.0)),
        peak_acceleration=float(np.max(accel, initial=0.0)),
        position_rms=float(np.sqrt(np.mean(err ** 2))),
        goal_reach_time=reach_time,
        final_goal_distance=final_dist,
        min_obstacle_clearance=_obstacle_clearance(log),
        mean_solve_ms_draft=_solve_ms(log, "draft"),
        mean_solve_ms_refined=_solve_ms(log, "refined"),
        contact_intervals=[list(iv) for iv in intervals])


def _series_arrays(rec: dict) -> tuple:
    s = rec["series"]
    return (np.asarray(s["times"]), np.asarray(s["normal_force"]),
            np.asarray(s["distance"]), np.asarray(s["ee_speed"]))


def _pair_rows(draft: dict, refined: dict, fn, t_log, table: list) -> None:
    """Append one comparison row per interval the draft scheduled."""
    d_times, _, d_dist, d_speed = _series_arrays(draft)
    r_times, r_lam, r_dist, r_speed = _series_arrays(refined)
    for iv in draft.get("schedule", []):
        arm = int(iv["arm"]) - 1
        start, end = float(iv["t_start"]), float(iv["t_end"])
        dm = (d_times >= start - 1e-9) & (d_times <= end + 1e-9)
        rm = (r_times >= start - 1e-9) & (r_times <= end + 1e-9)
        gm = (t_log >= start) & (t_log <= end)
        row = {
            "t": float(draft["t"]),
            "arm": arm + 1,
            "wall": iv.get("wall"),
            "t_start": start,
            "t_end": end,
            "draft_penetration": float(np.max(
                np.maximum(-d_dist[arm, dm], 0.0), initial=0.0)),
            "draft_contact_distance": float(np.max(
                np.abs(d_dist[arm, dm]), initial=0.0)),
            "draft_slip": float(np.max(d_speed[arm, dm], initial=0.0)),
            "draft_peak_force": float(iv["peak_force"]),
            "refined_contact_distance": None,
            "refined_slip": None,
            "refined_peak_force": None,
            "ground_truth_peak_force": float(np.max(fn[arm, gm],
                                                    initial=0.0)),
        }
        if rm.any():
            row["refined_contact_distance"] = float(np.max(
                np.abs(r_dist[arm, rm])))
            row["refined_slip"] = float(np.max(r_speed[arm, rm]))
            row["refined_peak_force"] = float(np.max(r_lam[arm, rm]))
        table.append(row)


def compare_levels(log: LoadedLog) -> list:
    """Draft-versus-refined table built from the per-solve node series.

    One row per contact interval scheduled by a draft solve that has a
    paired refined solve from the same tick.  Draft columns use the
    draft's own nodes inside the interval; refined columns use the
    refined plan's nodes in the same span (None when the span lies
    beyond the shorter refined horizon).  Raises MissingLogError when
    the sidecar lacks either level's records; an empty table just means
    no draft ever scheduled contact.
    """
    for level in ("draft", "refined"):
        if not any(r.get("level") == level for r in log.solves):
            raise MissingLogError(f"log has no {level} solve records")
    fn = np.stack([log.col("wall_fn1"), log.col("wall_fn2")])
    table: list = []
    pending = None
    for rec in log.solves:
        if rec.get("level") == "draft" and rec.get("series"):
            pending = rec
        elif rec.get("level") == "refined" and rec.get("paired") \
                and rec.get("series") and pending is not None:
            _pair_rows(pending, rec, fn, log.times, table)
            pending = None
    return table
