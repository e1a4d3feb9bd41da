"""Ground-truth closed loop: plant physics, scripted events, scenario runs.

The plant integrates the same momentum dynamics the planners use but with
its own contact model: walls are stiff spring-dampers with Coulomb
friction, arms carry rotor inertia and damping and are driven by torque.
Planner contact laws (tanh force, hard modes) never enter this module, so
a sim-vs-plan comparison is a real cross-check and not a tautology.

Extended sim state (22): the 16 planner coordinates followed by the six
actual joint rates.
"""

from __future__ import annotations

import logging
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path

import jax
import jax.numpy as jnp
import numpy as np

from . import model
from .environment import SdfEnvironment, _wall_distances
from .mpc import BilevelController, ReferenceTrajectory
from .scenario import Scenario
from .tracking import TrackingController

_log = logging.getLogger(__name__)

SIM_STATE_DIM = 22

# One row per sim step; the column order is part of the log contract.
COLUMNS = (
    ["t"]
    + [f"h{i}" for i in range(5)]
    + ["px", "py", "yaw", "pitch", "roll"]
    + [f"qj{i + 1}" for i in range(6)]
    + [f"qjd{i + 1}" for i in range(6)]
    + ["ref_x", "ref_y"]
    + ["drive_fx", "drive_fy", "drive_tau"]
    + [f"tau_j{i + 1}" for i in range(6)]
    + ["wall_f1x", "wall_f1y", "wall_f1z",
       "wall_f2x", "wall_f2y", "wall_f2z",
       "wall_fn1", "wall_fn2"]
    + ["ee_d1", "ee_d2", "ee_s1", "ee_s2"]
    + ["plan_lam1", "plan_lam2", "plan_d1", "plan_d2",
       "plan_s1", "plan_s2"]
    + ["draft_lam1", "draft_lam2", "draft_d1", "draft_d2",
       "draft_s1", "draft_s2"]
    + ["accel_x", "accel_y", "event_code", "stale", "singular"]
)

_EVENT_CODES = {"": 0, "push_start": 1, "push_end": 2,
                "obstacle_spawn": 3, "goal_set": 4}


@dataclass
class SimConfig:
    """Plant constants; contact here is ground truth, not a planner model.

    ``arm_point_mass`` optionally hangs a point mass on each hand for
    robustness experiments; it loads the body and joints through gravity.
    The energy bookkeeping assumes the default massless arms.
    """

    timestep: float = 1e-3
    k_wall: float = 2e4
    c_wall: float = 100.0
    rotor_inertia: float = 0.05
    joint_damping: float = 0.5
    arm_point_mass: float = 0.0
    noise_position: float = 0.0
    noise_attitude: float = 0.0

    def validate(self) -> None:
        if self.timestep <= 0.0:
            raise ValueError("timestep must be positive")
        if self.k_wall <= 0.0 or self.c_wall < 0.0:
            raise ValueError("k_wall must be > 0 and c_wall >= 0")
        if self.rotor_inertia <= 0.0 or self.joint_damping < 0.0:
            raise ValueError("rotor_inertia must be > 0 and joint_damping "
                             ">= 0")
        if self.arm_point_mass < 0.0:
            raise ValueError("arm_point_mass must be >= 0")
        if self.noise_position < 0.0 or self.noise_attitude < 0.0:
            raise ValueError("noise levels must be >= 0")


@dataclass
class RunLog:
    """Everything a run produced; serialization lives in runlog."""

    scenario_name: str
    kind: str
    seed: int
    columns: list
    rows: np.ndarray
    solves: list
    events: list
    meta: dict
    failure: dict | None = None


class WallPlant:
    """Jitted plant stepper for a fixed environment."""

    def __init__(self, robot: model.RobotParams, env: SdfEnvironment,
                 cfg: SimConfig, friction: float):
        cfg.validate()
        self.robot = robot
        self.env = env
        self.cfg = cfg
        self.friction = friction
        self._step, self._probe, self._energy = self._build()

    def _build(self):
        robot = self.robot
        cfg = self.cfg
        mu = self.friction
        points, normals, extents = (jnp.asarray(a)
                                    for a in self.env.arrays())
        n_walls = points.shape[0]

        def hand_force(x16, qjd, arm):
            """Spring-damper wall reaction on one hand, world frame."""
            p = model.forward_kinematics(x16[model.QB], x16[model.QJ],
                                         arm, robot)
            v = model.ee_velocity(x16, qjd, arm, robot)
            if n_walls == 0:
                return p, v, jnp.zeros(3), jnp.asarray(0.0), jnp.asarray(1e9)
            d_all = _wall_distances(p, points, normals, extents)
            depth = jnp.maximum(-d_all, 0.0)
            rate = jnp.sum(normals * v[None, :], axis=1)
            fn = jnp.where(depth > 0.0,
                           jnp.maximum(cfg.k_wall * depth
                                       - cfg.c_wall * rate, 0.0), 0.0)
            v_t = v[None, :] - rate[:, None] * normals
            t_speed = jnp.linalg.norm(v_t, axis=1)
            f_t = -mu * fn[:, None] * v_t / (t_speed[:, None] + 1e-6)
            force = jnp.sum(fn[:, None] * normals + f_t, axis=0)
            return p, v, force, jnp.sum(fn), jnp.min(d_all)

        def probe(xs):
            """Instantaneous contact data for logging."""
            x16 = xs[:16]
            qjd = xs[16:22]
            out = [hand_force(x16, qjd, arm) for arm in (1, 2)]
            forces = jnp.stack([o[2] for o in out])
            fn = jnp.stack([o[3] for o in out])
            dists = jnp.stack([o[4] for o in out])
            speeds = jnp.stack([jnp.linalg.norm(o[1]) for o in out])
            return forces, fn, dists, speeds

        def deriv(xs, drive, tau_j, push_force, push_height):
            x16 = xs[:16]
            qjd = xs[16:22]
            q_b = x16[model.QB]
            r_wb = model.euler_zyx_to_matrix(q_b[2:5])
            hands = [hand_force(x16, qjd, arm) for arm in (1, 2)]
            ee_pos = jnp.stack([h[0] for h in hands])
            ee_f = jnp.stack([h[2] for h in hands])
            if cfg.arm_point_mass > 0.0:
                sag = jnp.array([0.0, 0.0,
                                 -cfg.arm_point_mass * robot.gravity])
                ee_f = ee_f + sag[None, :]
            push_point = (jnp.array([q_b[0], q_b[1], robot.ball_radius])
                          + r_wb @ jnp.array([0.0, 0.0, push_height
                                              - robot.ball_radius]))
            h_dot = model.momentum_rates(
                x16, drive, ee_f, ee_pos,
                extra_points=push_point[None, :],
                extra_forces=push_force[None, :], params=robot)
            qb_dot = model.base_rates(x16[model.H], q_b, robot)
            tau_ext = jnp.zeros(6)
            for arm in (1, 2):
                jac = model.ee_jacobian(q_b, x16[model.QJ], arm, robot)
                tau_ext = tau_ext + jac.T @ (r_wb.T @ ee_f[arm - 1])
            qj_ddot = (tau_j - cfg.joint_damping * qjd + tau_ext) \
                / cfg.rotor_inertia
            return jnp.concatenate([h_dot, qb_dot, qjd, qj_ddot])

        def step(xs, drive, tau_j, push_force, push_height):
            dt = cfg.timestep
            k1 = deriv(xs, drive, tau_j, push_force, push_height)
            k2 = deriv(xs + 0.5 * dt * k1, drive, tau_j, push_force,
                       push_height)
            k3 = deriv(xs + 0.5 * dt * k2, drive, tau_j, push_force,
                       push_height)
            k4 = deriv(xs + dt * k3, drive, tau_j, push_force, push_height)
            return xs + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)

        def energy(xs):
            x16 = xs[:16]
            qjd = xs[16:22]
            q_b = x16[model.QB]
            angles = q_b[2:5]
            qb_dot = model.base_rates(x16[model.H], q_b, self.robot)
            r = model.euler_zyx_to_matrix(angles)
            omega = model.euler_rate_map(angles) @ qb_dot[2:5]
            r_com = r @ jnp.asarray(robot.com_offset)
            v_com = (jnp.array([qb_dot[0], qb_dot[1], 0.0])
                     + jnp.cross(omega, r_com))
            i_world = r @ jnp.asarray(robot.inertia) @ r.T
            kinetic = (0.5 * robot.mass * v_com @ v_com
                       + 0.5 * omega @ i_world @ omega
                       + 0.5 * cfg.rotor_inertia * qjd @ qjd)
            potential = robot.mass * robot.gravity \
                * (robot.ball_radius + r_com[2])
            spring = 0.0
            if n_walls:
                for arm in (1, 2):
                    p = model.forward_kinematics(q_b, x16[model.QJ], arm,
                                                 robot)
                    depth = jnp.maximum(
                        -_wall_distances(p, points, normals, extents), 0.0)
                    spring = spring + 0.5 * cfg.k_wall * jnp.sum(depth ** 2)
            return kinetic, potential, spring

        return jax.jit(step), jax.jit(probe), jax.jit(energy)

    def step(self, xs, drive, tau_j, push_force=None, push_height=0.8):
        push = np.zeros(3) if push_force is None else np.asarray(push_force)
        return np.asarray(self._step(jnp.asarray(xs), jnp.asarray(drive),
                                     jnp.asarray(tau_j), jnp.asarray(push),
                                     push_height))

    def contact(self, xs):
        forces, fn, dists, speeds = self._probe(jnp.asarray(xs))
        return (np.asarray(forces), np.asarray(fn), np.asarray(dists),
                np.asarray(speeds))

    def energy(self, xs) -> dict:
        kinetic, potential, spring = (float(v) for v in
                                      self._energy(jnp.asarray(xs)))
        return {"kinetic": kinetic, "potential": potential,
                "spring": spring,
                "total": kinetic + potential + spring}


# Path planning around box obstacles -------------------------------------------

def _segment_hits_box(a, b, lo, hi) -> bool:
    """2D segment vs axis-aligned box, slab method."""
    d = b - a
    t0, t1 = 0.0, 1.0
    for axis in range(2):
        if abs(d[axis]) < 1e-12:
            if not lo[axis] <= a[axis] <= hi[axis]:
                return False
        else:
            ta = (lo[axis] - a[axis]) / d[axis]
            tb = (hi[axis] - a[axis]) / d[axis]
            ta, tb = min(ta, tb), max(ta, tb)
            t0, t1 = max(t0, ta), min(t1, tb)
            if t0 > t1:
                return False
    return True


def replan_path(goal, obstacles, current_pose, cruise_speed: float,
                clearance: float, t_start: float = 0.0,
                yaw: float = 0.0) -> ReferenceTrajectory:
    """Piecewise-linear reference to the goal, detouring around boxes.

    Each obstacle is a 2D axis-aligned box (center, size); the path keeps
    ``clearance`` distance by routing via inflated box corners.  If no
    collision-free corner detour exists the reference degenerates to an
    emergency stop at the current position.
    """
    start = np.asarray(current_pose, dtype=float)[:2]
    goal = np.asarray(goal, dtype=float)
    pad = clearance + 0.05

    def blocked(a, b):
        for center, size in obstacles:
            lo = np.asarray(center) - 0.5 * np.asarray(size) - pad
            hi = np.asarray(center) + 0.5 * np.asarray(size) + pad
            if _segment_hits_box(np.asarray(a), np.asarray(b), lo, hi):
                return True
        return False

    waypoints = [start]
    if not blocked(start, goal):
        waypoints.append(goal)
    else:
        best = None
        for center, size in obstacles:
            lo = np.asarray(center) - 0.5 * np.asarray(size) - 1.25 * pad
            hi = np.asarray(center) + 0.5 * np.asarray(size) + 1.25 * pad
            nw, ne = np.array([lo[0], hi[1]]), np.array([hi[0], hi[1]])
            sw, se = np.array([lo[0], lo[1]]), np.array([hi[0], lo[1]])
            # Single corners handle L-shaped routes; same-side pairs are
            # needed when the goal sits directly behind the box.
            candidates = ([[c] for c in (nw, ne, sw, se)]
                          + [[nw, ne], [ne, nw], [sw, se], [se, sw],
                             [nw, sw], [sw, nw], [ne, se], [se, ne]])
            for via in candidates:
                legs = [start] + via + [goal]
                if any(blocked(a, b) for a, b in zip(legs[:-1], legs[1:])):
                    continue
                length = sum(np.linalg.norm(b - a)
                             for a, b in zip(legs[:-1], legs[1:]))
                if best is None or length < best[0]:
                    best = (length, via)
        if best is None:
            _log.warning("no collision-free detour; issuing emergency stop")
            return ReferenceTrajectory(
                waypoints=np.stack([start, start]),
                times=np.array([t_start, t_start + 1.0]), yaw=yaw)
        waypoints.extend(best[1])
        waypoints.append(goal)

    pts = np.stack(waypoints)
    legs = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    times = t_start + np.concatenate(
        [[0.0], np.cumsum(np.maximum(legs / cruise_speed, 1e-3))])
    return ReferenceTrajectory(waypoints=pts, times=times, yaw=yaw)


# Scenario runner ---------------------------------------------------------------

def _enable_compile_cache() -> None:
    """Persistent XLA cache: repeated runs skip recompilation."""
    try:
        cache = Path(tempfile.gettempdir()) / "ballbot-mpc-jax-cache"
        cache.mkdir(exist_ok=True)
        jax.config.update("jax_compilation_cache_dir", str(cache))
        jax.config.update("jax_persistent_cache_min_compile_time_secs", 1.0)
    except Exception:  # cache is an optimization, never a requirement
        pass


def initial_sim_state(scn: Scenario, robot: model.RobotParams) -> np.ndarray:
    init = scn.initial
    x16 = model.upright_state(
        p_xy=init.get("position", (0.0, 0.0)),
        yaw=float(init.get("yaw", 0.0)),
        q_j=init.get("joints"),
        velocity_xy=init.get("velocity", (0.0, 0.0)),
        params=robot)
    return np.concatenate([x16, np.zeros(6)])


def run_scenario(scn: Scenario, seed: int | None = None) -> RunLog:
    """Run the full closed loop and return the in-memory log.

    Deterministic: the only randomness is measurement noise drawn from a
    seeded generator, and the default noise level is zero.
    """
    _enable_compile_cache()
    scn.validate()
    seed = scn.seed if seed is None else int(seed)
    robot = scn.build_robot()
    env = scn.build_environment()
    soft = scn.build_soft()
    settings = scn.build_settings()
    weights = scn.build_weights()
    gains = scn.build_gains()
    cfg = SimConfig(**scn.sim)
    cfg.validate()
    limits = scn.build_limits()
    rng = np.random.default_rng(seed)

    ctrl = BilevelController(env=env, robot=robot, soft=soft,
                             weights=weights, limits=limits,
                             settings=settings)
    tracker = TrackingController(gains, limits, robot, cfg.timestep,
                                 staleness_limit=settings.staleness_limit)
    plant = WallPlant(robot, env, cfg, soft.friction)

    goal = scn.goal
    obstacles: list = []
    ref = scn.build_reference()
    if ref is None:
        xy0 = np.asarray(scn.initial.get("position", (0.0, 0.0)))
        ref = replan_path(goal, obstacles, xy0, scn.cruise_speed,
                          scn.body_radius,
                          yaw=float(scn.reference.get("yaw", 0.0)))

    xs = initial_sim_state(scn, robot)
    n_steps = int(round(scn.duration / cfg.timestep))
    events = sorted(scn.events, key=lambda ev: ev.time)
    next_event = 0
    push_until = -1.0
    push_force = np.zeros(3)
    push_height = 0.8
    rows = np.zeros((n_steps, len(COLUMNS)))
    event_log: list = []
    failure = None

    def measure(x16):
        if cfg.noise_position == 0.0 and cfg.noise_attitude == 0.0:
            return x16
        noisy = x16.copy()
        noisy[5:7] += rng.normal(0.0, cfg.noise_position, 2)
        noisy[7:10] += rng.normal(0.0, cfg.noise_attitude, 3)
        return noisy

    # Warm-up: run the t=0 solves and trace the plant/tracking paths before
    # the clock starts, so reported loop time measures the algorithms and
    # not one-time code generation.  tick() is due-time based, so the first
    # loop pass will not re-run these solves.
    warm_started = time.perf_counter()
    bundle = ctrl.tick(0.0, measure(xs[:16]), ref)
    tracker.command(0.0, xs[:16], xs[16:22], bundle)
    tracker.reset()
    plant.contact(xs)
    plant.step(xs, np.zeros(3), np.zeros(6))
    warmup_seconds = time.perf_counter() - warm_started

    loop_started = time.perf_counter()
    for k in range(n_steps):
        t = k * cfg.timestep
        marker = ""
        while next_event < len(events) and events[next_event].time <= t \
                + 1e-12:
            ev = events[next_event]
            next_event += 1
            if ev.kind == "push_disturbance":
                push_force = np.asarray(ev.force, dtype=float)
                push_height = float(ev.height)
                push_until = ev.time + ev.duration
                marker = "push_start"
            elif ev.kind == "spawn_obstacle":
                # Obstacles exist for the path planner only; they are
                # never contact surfaces (the robot pushes walls, not
                # boxes), so the controller and plant are untouched.
                obstacles.append((np.asarray(ev.center, dtype=float),
                                  np.asarray(ev.size, dtype=float)))
                if goal is not None:
                    ref = replan_path(goal, obstacles, xs[5:7],
                                      scn.cruise_speed, scn.body_radius,
                                      t_start=t,
                                      yaw=float(scn.reference.get("yaw",
                                                                  0.0)))
                marker = "obstacle_spawn"
            elif ev.kind == "set_goal":
                goal = np.asarray(ev.goal, dtype=float)
                ref = replan_path(goal, obstacles, xs[5:7],
                                  scn.cruise_speed, scn.body_radius,
                                  t_start=t, yaw=ev.yaw)
                marker = "goal_set"
            event_log.append({"kind": ev.kind, "time": float(ev.time),
                              "applied_at": float(t), "marker": marker})
        if push_until > 0.0 and t >= push_until:
            push_until = -1.0
            push_force = np.zeros(3)
            marker = marker or "push_end"
            event_log.append({"kind": "push_release", "time": float(t),
                              "applied_at": float(t),
                              "marker": "push_end"})

        x_meas = measure(xs[:16])
        try:
            bundle = ctrl.tick(t, x_meas, ref)
        except Exception as exc:  # deliberate: truncate with a record
            _log.error("controller failure at t=%.3f: %s", t, exc)
            failure = {"time": float(t), "reason": f"controller: {exc}"}
            rows = rows[:k]
            break
        cmd = tracker.command(t, x_meas, xs[16:22], bundle)

        forces, fn, dists, speeds = plant.contact(xs)
        push_now = push_force if t < push_until else np.zeros(3)
        accel = (forces[0][:2] + forces[1][:2] + cmd.drive[:2]
                 + push_now[:2]) / robot.mass
        rows[k] = _row(t, xs, ref.position(t), cmd, forces, fn, dists,
                       speeds, bundle, accel, marker)

        xs = plant.step(xs, cmd.drive, cmd.joint_torques, push_now,
                        push_height)
        if not np.all(np.isfinite(xs)) \
                or max(abs(xs[8]), abs(xs[9])) > 1.5 * model.MAX_LEAN_RAD:
            _log.error("state divergence at t=%.3f", t)
            failure = {"time": float(t), "reason": "state divergence"}
            rows = rows[:k + 1]
            break
    loop_seconds = time.perf_counter() - loop_started

    draft_ms = [r["wall_ms"] for r in ctrl.solve_records
                if r["level"] == "draft"]
    refine_ms = [r["wall_ms"] for r in ctrl.solve_records
                 if r["level"] == "refined"]
    meta = {
        "duration": scn.duration,
        "timestep": cfg.timestep,
        "draft_rate": settings.draft_rate,
        "refine_rate": settings.refine_rate,
        "draft_solves": ctrl.ci_count,
        "refine_solves": ctrl.hybrid_count,
        "warmup_seconds": warmup_seconds,
        "loop_seconds": loop_seconds,
        "mean_draft_ms": float(np.mean(draft_ms)) if draft_ms else 0.0,
        "mean_refine_ms": float(np.mean(refine_ms)) if refine_ms else 0.0,
        "body_radius": scn.body_radius,
        "goal": None if goal is None else [float(g) for g in goal],
        "obstacles": [[c.tolist(), s.tolist()] for c, s in obstacles],
        "start_position": [float(v) for v in
                           scn.initial.get("position", (0.0, 0.0))],
    }
    return RunLog(scenario_name=scn.name, kind=scn.kind, seed=seed,
                  columns=list(COLUMNS), rows=rows,
                  solves=ctrl.solve_records, events=event_log, meta=meta,
                  failure=failure)


def _row(t, xs, ref_xy, cmd, forces, fn, dists, speeds, bundle, accel,
         marker: str) -> np.ndarray:
    refined = bundle.refined
    draft = bundle.draft
    if refined is not None:
        plan = np.concatenate([refined.normal_forces[:, 1],
                               refined.distances[:, 1],
                               refined.ee_speeds[:, 1]])
    else:
        plan = np.full(6, np.nan)
    if draft is not None:
        dr = np.concatenate([draft.normal_forces[:, 1],
                             draft.distances[:, 1],
                             draft.ee_speeds[:, 1]])
    else:
        dr = np.full(6, np.nan)
    return np.concatenate([
        [t], xs[:16], xs[16:22], ref_xy, cmd.drive, cmd.joint_torques,
        forces.ravel(), fn, dists, speeds, plan, dr, accel,
        [float(_EVENT_CODES.get(marker, 0)), float(cmd.stale),
         float(cmd.singular)]])
