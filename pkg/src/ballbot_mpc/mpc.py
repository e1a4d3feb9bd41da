"""Two-level contact-aware MPC.

The draft level plans with the smooth contact model: wall forces are a
sigmoid of penetration, shear is carried by friction-ratio inputs, and a
complementarity penalty discourages pushing while the hand slides.  Its
normal-force profile is thresholded into a contact schedule.

The refinement level re-solves the same horizon under hard contact-mode
constraints derived from that schedule: during contact the hand is pinned
to the surface with a minimum normal force inside friction cones; out of
contact the arm force is zero and the hand stays in free space.  Mode
flags are per-node runtime parameters, so schedule changes never retrace
the compiled solver.

``BilevelController`` runs the draft at a low rate and the refinement at
a high rate on a deterministic due-time grid and hands the latest refined
plan to the tracking layer.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import jax
import jax.numpy as jnp
import numpy as np

from . import contact, model, solver
from .contact import ContactSchedule, SoftContactParams, extract_schedule
from .environment import SdfEnvironment
from .model import InputLimits, RobotParams

_log = logging.getLogger(__name__)

CI_INPUT_DIM = 13
CI_DRIVE = slice(0, 3)
CI_RATES = slice(3, 9)
CI_AUX = slice(9, 13)   # (tangent, vertical) friction ratios per arm

_INACTIVE = 10.0  # inequality filler comfortably above any margin


@dataclass
class MpcWeights:
    """Quadratic tracking and input weights shared by both levels."""

    position: float = 50.0
    yaw: float = 20.0
    lean: float = 100.0
    momentum: float = 1.0
    joints: float = 5.0
    drive_input: float = 1e-2
    rate_input: float = 1e-3
    aux_input: float = 1e-4
    contact_input: float = 1e-4
    complementarity: float = 1e-2
    # Terminal cost = terminal_scale * stage quadratic (units of seconds).
    terminal_scale: float = 0.5

    def validate(self) -> None:
        for name in ("position", "yaw", "lean", "momentum", "joints",
                     "drive_input", "rate_input", "aux_input",
                     "contact_input"):
            if not getattr(self, name) > 0.0:
                raise ValueError(f"{name} must be positive")
        if self.complementarity < 0.0 or self.terminal_scale < 0.0:
            raise ValueError("complementarity and terminal_scale must be "
                             ">= 0")

    def state_diag(self) -> np.ndarray:
        return np.array([self.momentum] * 5
                        + [self.position] * 2
                        + [self.yaw] + [self.lean] * 2
                        + [self.joints] * 6)


@dataclass
class MpcSettings:
    """Rates, horizons and constraint weights of the two levels."""

    draft_rate: float = 15.0
    refine_rate: float = 200.0
    draft_horizon: float = 1.0
    refine_horizon: float = 1.0
    draft_nodes: int = 15
    refine_nodes: int = 40
    force_threshold: float = 5.0       # N, schedule extraction
    min_contact_duration: float = 0.5  # s, schedule extraction
    lambda_min: float = 1.0            # N, planned force floor in contact
    staleness_limit: float = 0.5       # s, tracking falls back beyond this
    contact_eq_weight: float = 4e4
    contact_ineq_weight: float = 200.0
    box_weight: float = 1e3
    # The first solve of a run starts far from feasibility and gets a
    # larger iteration budget; warm-started resolves only polish.
    refine_cold_iterations: int = 40
    draft_solver: solver.SolverSettings = field(
        default_factory=lambda: solver.SolverSettings(
            max_iterations=25, tol_cost=1e-5))
    refine_solver: solver.SolverSettings = field(
        default_factory=lambda: solver.SolverSettings(
            max_iterations=8, tol_cost=1e-5))

    def validate(self) -> None:
        if self.draft_rate <= 0 or self.refine_rate <= 0:
            raise ValueError("rates must be positive")
        if self.refine_rate < self.draft_rate:
            raise ValueError("refine_rate must be >= draft_rate")
        if self.draft_horizon <= 0 or self.refine_horizon <= 0:
            raise ValueError("horizons must be positive")
        if self.draft_nodes < 2 or self.refine_nodes < 2:
            raise ValueError("node counts must be >= 2")
        if self.refine_cold_iterations < 1:
            raise ValueError("refine_cold_iterations must be >= 1")
        if self.lambda_min <= 0:
            raise ValueError("lambda_min must be positive")
        self.draft_solver.validate()
        self.refine_solver.validate()


@dataclass
class ReferenceTrajectory:
    """Piecewise-linear position reference with arrival times.

    Beyond the last waypoint the reference holds position with zero
    velocity.  Momentum references follow the segment velocity; lean
    references are zero.  Joints default to zero (arms hang) unless a
    posture is given, e.g. a guard stance with hands raised at a wall.
    """

    waypoints: np.ndarray
    times: np.ndarray
    yaw: float = 0.0
    joints: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.waypoints = np.atleast_2d(np.asarray(self.waypoints,
                                                  dtype=float))
        self.times = np.asarray(self.times, dtype=float)
        if len(self.times) != len(self.waypoints):
            raise ValueError("waypoints and times must have equal length")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("times must be strictly increasing")
        if self.joints is not None:
            self.joints = np.asarray(self.joints, dtype=float)
            if self.joints.shape != (6,):
                raise ValueError("joints reference must have 6 entries")

    def position(self, t: float) -> np.ndarray:
        return np.array([np.interp(t, self.times, self.waypoints[:, i])
                         for i in range(2)])

    def velocity(self, t: float) -> np.ndarray:
        if t >= self.times[-1] or len(self.times) == 1:
            return np.zeros(2)
        k = int(np.searchsorted(self.times, t, side="right") - 1)
        k = max(k, 0)
        dt = self.times[k + 1] - self.times[k]
        return (self.waypoints[k + 1] - self.waypoints[k]) / dt

    def state_ref(self, t: float, robot: RobotParams) -> np.ndarray:
        pos = self.position(t)
        vel = self.velocity(t)
        x = np.zeros(model.STATE_DIM)
        x[0:2] = robot.mass * vel
        x[5:7] = pos
        x[7] = self.yaw
        if self.joints is not None:
            x[10:16] = self.joints
        return x

    def node_refs(self, times, robot: RobotParams) -> np.ndarray:
        return np.stack([self.state_ref(t, robot) for t in times])


def hold_reference(position, yaw: float = 0.0,
                   joints=None) -> ReferenceTrajectory:
    """Stay where you are (or where you are told)."""
    p = np.asarray(position, dtype=float)
    return ReferenceTrajectory(waypoints=np.stack([p, p]),
                               times=np.array([0.0, 1.0]), yaw=yaw,
                               joints=joints)


@dataclass
class DraftPlan:
    """Smooth-model plan plus the per-node contact series it implies."""

    solution: solver.TrajectorySolution
    normal_forces: np.ndarray   # (2, n+1)
    ee_positions: np.ndarray    # (2, n+1, 3)
    ee_speeds: np.ndarray       # (2, n+1)
    distances: np.ndarray       # (2, n+1)
    schedule: ContactSchedule
    solve_time: float


@dataclass
class RefinedPlan:
    """Hard-mode plan with the series needed for invariant checks."""

    solution: solver.TrajectorySolution
    flags: np.ndarray           # (2, n) stage-node contact activity
    normal_forces: np.ndarray   # (2, n) planned lambda_n at stage nodes
    ee_speeds: np.ndarray       # (2, n)
    distances: np.ndarray       # (2, n+1)
    schedule: ContactSchedule
    solve_time: float


def _box_residuals(u, bounds):
    return jnp.concatenate([bounds - u, bounds + u])


class CiPlanner:
    """Draft level: smooth contact forces, friction-ratio inputs."""

    def __init__(self, env: SdfEnvironment, robot: RobotParams,
                 soft: SoftContactParams, weights: MpcWeights,
                 limits: InputLimits, settings: MpcSettings):
        self.env = env
        self.robot = robot
        self.soft = soft
        self.weights = weights
        self.limits = limits
        self.settings = settings
        self._build()

    def _build(self) -> None:
        env, robot, soft = self.env, self.robot, self.soft
        w = self.weights
        q_diag = jnp.asarray(w.state_diag())
        r_diag = jnp.asarray(
            [w.drive_input] * 3 + [w.rate_input] * 6 + [w.aux_input] * 4)
        bounds = jnp.asarray(
            [self.limits.drive_force, self.limits.drive_force,
             self.limits.drive_torque] + [self.limits.joint_rate] * 6
            + [soft.friction] * 4)
        has_walls = bool(env.walls)

        def arm_force(x, u_tilde, arm):
            p = model.forward_kinematics(x[model.QB], x[model.QJ], arm,
                                         robot)
            if not has_walls:
                return jnp.zeros(3), p, jnp.asarray(0.0)
            d = env.sdf(p)
            lam = contact.soft_normal_force(d, soft)
            e_n, e_t, e_z = env.contact_frame(p)
            aux = u_tilde[CI_AUX][2 * (arm - 1):2 * (arm - 1) + 2]
            f = lam * (e_n + aux[0] * e_t + aux[1] * e_z)
            return f, p, lam

        def dynamics(x, u_tilde, t):
            f1, p1, _ = arm_force(x, u_tilde, 1)
            f2, p2, _ = arm_force(x, u_tilde, 2)
            u15 = jnp.concatenate(
                [u_tilde[CI_DRIVE], f1, f2, u_tilde[CI_RATES]])
            return model.dynamics(x, u15, jnp.stack([p1, p2]), robot)

        def stage_cost(x, u_tilde, t, p):
            dx = x - p[:16]
            cost = 0.5 * jnp.sum(q_diag * dx ** 2) \
                + 0.5 * jnp.sum(r_diag * u_tilde ** 2)
            if has_walls and w.complementarity > 0.0:
                for arm in (1, 2):
                    _, _, lam = arm_force(x, u_tilde, arm)
                    pdot = model.ee_velocity(x, u_tilde[CI_RATES], arm,
                                             robot)
                    cost = cost + w.complementarity * lam ** 2 \
                        * jnp.sum(pdot ** 2)
            return cost

        def terminal_cost(x, p):
            dx = x - p[:16]
            return 0.5 * w.terminal_scale * jnp.sum(q_diag * dx ** 2)

        def ineq(x, u_tilde, t, p):
            return _box_residuals(u_tilde, bounds)

        margins = jnp.asarray(np.concatenate([
            0.02 * np.asarray(bounds), 0.02 * np.asarray(bounds)]))
        mode = solver.Mode(ineq=ineq, ineq_weight=self.settings.box_weight,
                           ineq_margin=margins)
        self.ocp = solver.OcpDefinition(
            state_dim=model.STATE_DIM, input_dim=CI_INPUT_DIM,
            horizon=self.settings.draft_horizon,
            node_count=self.settings.draft_nodes,
            dynamics=dynamics, stage_cost=stage_cost,
            terminal_cost=terminal_cost, modes=[mode], param_dim=16)

        def node_series(states, inputs):
            # Per-node contact quantities; the last node reuses the final
            # input for its joint rates.
            inputs_full = jnp.concatenate([inputs, inputs[-1:]], axis=0)

            def one(x, u_tilde):
                rows = []
                for arm in (1, 2):
                    p = model.forward_kinematics(x[model.QB], x[model.QJ],
                                                 arm, robot)
                    d = env.sdf(p) if has_walls else jnp.asarray(1e9)
                    lam = contact.soft_normal_force(d, soft) if has_walls \
                        else jnp.asarray(0.0)
                    pdot = model.ee_velocity(x, u_tilde[CI_RATES], arm,
                                             robot)
                    speed = jnp.sqrt(jnp.sum(pdot ** 2))
                    rows.append((lam, p, speed, d))
                lam = jnp.stack([rows[0][0], rows[1][0]])
                pos = jnp.stack([rows[0][1], rows[1][1]])
                speed = jnp.stack([rows[0][2], rows[1][2]])
                dist = jnp.stack([rows[0][3], rows[1][3]])
                return lam, pos, speed, dist

            return jax.vmap(one)(states, inputs_full)

        self._node_series = jax.jit(node_series)

    def draft_plan(self, x0, ref: ReferenceTrajectory, t0: float,
                   guess=None) -> DraftPlan:
        times = t0 + self.ocp.dt * np.arange(self.ocp.node_count + 1)
        params = ref.node_refs(times, self.robot)
        sol = solver.solve(self.ocp, x0, self.settings.draft_solver,
                           node_params=params, initial_guess=guess, t0=t0)
        lam, pos, speed, dist = (np.asarray(a) for a in self._node_series(
            jnp.asarray(sol.states), jnp.asarray(sol.inputs)))
        schedule = extract_schedule(
            lam.T, sol.times, threshold=self.settings.force_threshold,
            min_duration=self.settings.min_contact_duration,
            ee_positions=np.swapaxes(pos, 0, 1), env=self.env)
        return DraftPlan(solution=sol, normal_forces=lam.T,
                         ee_positions=np.swapaxes(pos, 0, 1),
                         ee_speeds=speed.T, distances=dist.T,
                         schedule=schedule, solve_time=t0)


class HybridPlanner:
    """Refinement level: hard contact modes from a given schedule."""

    def __init__(self, env: SdfEnvironment, robot: RobotParams,
                 soft: SoftContactParams, weights: MpcWeights,
                 limits: InputLimits, settings: MpcSettings):
        self.env = env
        self.robot = robot
        self.soft = soft
        self.weights = weights
        self.limits = limits
        self.settings = settings
        self._build()

    def _build(self) -> None:
        env, robot = self.env, self.robot
        w = self.weights
        st = self.settings
        q_diag = jnp.asarray(w.state_diag())
        r_diag = jnp.asarray([w.drive_input] * 3 + [w.contact_input] * 6
                             + [w.rate_input] * 6)
        # Planned contact forces may not exceed what the contact model was
        # told it can deliver, so those axes take the model cap.
        bounds_np = self.limits.hybrid_bounds()
        bounds_np[3:9] = self.soft.f_max
        bounds = jnp.asarray(bounds_np)
        friction = self.soft.friction
        lam_min = st.lambda_min
        has_walls = bool(env.walls)

        def dynamics(x, u, t):
            p1 = model.forward_kinematics(x[model.QB], x[model.QJ], 1, robot)
            p2 = model.forward_kinematics(x[model.QB], x[model.QJ], 2, robot)
            return model.dynamics(x, u, jnp.stack([p1, p2]), robot)

        def stage_cost(x, u, t, p):
            dx = x - p[:16]
            return 0.5 * jnp.sum(q_diag * dx ** 2) \
                + 0.5 * jnp.sum(r_diag * u ** 2)

        def terminal_cost(x, p):
            dx = x - p[:16]
            return 0.5 * w.terminal_scale * jnp.sum(q_diag * dx ** 2)

        def arm_terms(x, u, arm):
            f_c = u[model.U_FC1] if arm == 1 else u[model.U_FC2]
            p = model.forward_kinematics(x[model.QB], x[model.QJ], arm,
                                         robot)
            d = env.sdf(p) if has_walls else jnp.asarray(1e9)
            pdot = model.ee_velocity(x, u[model.U_RATES], arm, robot)
            if has_walls:
                lam = contact.contact_force_components(f_c, p, env)
            else:
                lam = jnp.zeros(3)
            return f_c, d, pdot, lam

        def eq(x, u, t, p):
            # flag blends the two mode variants so the schedule stays a
            # runtime quantity: in contact the hand is pinned (velocity
            # and distance), out of contact the arm force must vanish.
            rows = []
            for arm in (1, 2):
                flag = p[15 + arm]
                f_c, d, pdot, _ = arm_terms(x, u, arm)
                rows.append(flag * pdot + (1.0 - flag) * f_c)
                rows.append(jnp.array([flag * d]))
            return jnp.concatenate(rows)

        def ineq(x, u, t, p):
            rows = [_box_residuals(u, bounds)]
            for arm in (1, 2):
                flag = p[15 + arm]
                _, d, _, lam = arm_terms(x, u, arm)
                on = jnp.array([
                    lam[0] - lam_min,
                    friction * lam[0] - lam[1],
                    friction * lam[0] + lam[1],
                    friction * lam[0] - lam[2],
                    friction * lam[0] + lam[2],
                ])
                rows.append(flag * on + (1.0 - flag) * _INACTIVE)
                rows.append(jnp.array([(1.0 - flag) * d + flag * _INACTIVE]))
            return jnp.concatenate(rows)

        box_margin = 0.02 * bounds_np
        margins = np.concatenate([
            box_margin, box_margin,
            [0.5, 0.5, 0.5, 0.5, 0.5, 0.01],   # arm 1: forces then distance
            [0.5, 0.5, 0.5, 0.5, 0.5, 0.01],   # arm 2
        ])
        box_w = np.full(2 * len(box_margin), st.box_weight)
        cone_w = np.tile([st.contact_ineq_weight] * 5 + [st.box_weight], 2)
        mode = solver.Mode(
            eq=eq, eq_weight=st.contact_eq_weight,
            ineq=ineq, ineq_weight=jnp.asarray(np.concatenate(
                [box_w, cone_w])),
            ineq_margin=jnp.asarray(margins))
        self.ocp = solver.OcpDefinition(
            state_dim=model.STATE_DIM, input_dim=model.HYBRID_INPUT_DIM,
            horizon=st.refine_horizon, node_count=st.refine_nodes,
            dynamics=dynamics, stage_cost=stage_cost,
            terminal_cost=terminal_cost, modes=[mode], param_dim=18)

        def node_series(states, inputs):
            def one(x, u):
                lam = []
                speed = []
                for arm in (1, 2):
                    _, _, pdot, comps = arm_terms(x, u, arm)
                    lam.append(comps[0])
                    speed.append(jnp.sqrt(jnp.sum(pdot ** 2)))
                return jnp.stack(lam), jnp.stack(speed)

            lam, speed = jax.vmap(one)(states[:-1], inputs)

            def dist_one(x):
                out = []
                for arm in (1, 2):
                    p = model.forward_kinematics(x[model.QB], x[model.QJ],
                                                 arm, robot)
                    out.append(env.sdf(p) if has_walls else jnp.asarray(1e9))
                return jnp.stack(out)

            dist = jax.vmap(dist_one)(states)
            return lam, speed, dist

        self._node_series = jax.jit(node_series)

    def stage_flags(self, schedule: ContactSchedule, t0: float) -> np.ndarray:
        """(2, n) contact activity on the stage-node grid.

        Interval edges snap outward (start down, end up) so the enforced
        window always covers the extracted one.
        """
        n = self.ocp.node_count
        dt = self.ocp.dt
        flags = np.zeros((2, n))
        for iv in schedule.intervals:
            k0 = int(np.floor((iv.t_start - t0) / dt + 1e-9))
            k1 = int(np.ceil((iv.t_end - t0) / dt - 1e-9))
            k0 = max(k0, 0)
            k1 = min(k1, n)
            if k1 > k0:
                flags[iv.arm_index - 1, k0:k1] = 1.0
        return flags

    def refine_plan(self, x0, ref: ReferenceTrajectory,
                    schedule: ContactSchedule, t0: float, guess=None,
                    max_iterations: int | None = None) -> RefinedPlan:
        n = self.ocp.node_count
        times = t0 + self.ocp.dt * np.arange(n + 1)
        refs = ref.node_refs(times, self.robot)
        flags = self.stage_flags(schedule, t0)
        params = np.concatenate(
            [refs, np.concatenate([flags.T, [[0.0, 0.0]]]), ], axis=1)
        sset = self.settings.refine_solver
        if max_iterations is not None:
            sset = replace(sset, max_iterations=max_iterations)
        sol = solver.solve(self.ocp, x0, sset,
                           node_params=params, initial_guess=guess, t0=t0)
        lam, speed, dist = (np.asarray(a) for a in self._node_series(
            jnp.asarray(sol.states), jnp.asarray(sol.inputs)))
        return RefinedPlan(solution=sol, flags=flags,
                           normal_forces=lam.T, ee_speeds=speed.T,
                           distances=dist.T, schedule=schedule,
                           solve_time=t0)


@dataclass
class PlanBundle:
    """What the tracking layer consumes at any instant."""

    refined: RefinedPlan | None
    draft: DraftPlan | None
    schedule: ContactSchedule
    used_fallback: bool = False

    def active_solution(self) -> solver.TrajectorySolution | None:
        if self.refined is not None:
            return self.refined.solution
        if self.draft is not None:
            return self.draft.solution
        return None


def _shift_guess(sol: solver.TrajectorySolution, t0: float,
                 dt: float) -> np.ndarray:
    """Time-shift a previous solution's inputs onto the new horizon."""
    shift = int(round((t0 - float(sol.times[0])) / dt))
    shift = max(shift, 0)
    n = len(sol.inputs)
    idx = np.minimum(np.arange(n) + shift, n - 1)
    return sol.inputs[idx]


class BilevelController:
    """Runs both levels on their due-time grids and keeps solve records."""

    def __init__(self, env: SdfEnvironment, robot: RobotParams,
                 soft: SoftContactParams, weights: MpcWeights,
                 limits: InputLimits, settings: MpcSettings,
                 start_time: float = 0.0):
        settings.validate()
        weights.validate()
        limits.validate()
        soft.validate()
        self.settings = settings
        self.robot = robot
        self.ci = CiPlanner(env, robot, soft, weights, limits, settings)
        self.hybrid = HybridPlanner(env, robot, soft, weights, limits,
                                    settings)
        self.ci_period = 1.0 / settings.draft_rate
        self.hybrid_period = 1.0 / settings.refine_rate
        self._next_ci = start_time
        self._next_hybrid = start_time
        self.ci_count = 0
        self.hybrid_count = 0
        self.bundle = PlanBundle(refined=None, draft=None,
                                 schedule=ContactSchedule())
        self.solve_records: list = []
        self._pair_pending = False

    def _record(self, level: str, t: float, plan, wall_ms: float,
                paired: bool) -> None:
        sol = plan.solution
        rec = {
            "level": level,
            "t": float(t),
            "cost": sol.cost,
            "iterations": sol.iterations,
            "converged": bool(sol.converged),
            "diverged": bool(sol.diverged),
            "max_eq_residual": sol.max_eq_residual,
            "max_ineq_violation": sol.max_ineq_violation,
            "schedule": [
                {"arm": iv.arm_index, "t_start": iv.t_start,
                 "t_end": iv.t_end, "wall": iv.wall_id,
                 "peak_force": iv.peak_force}
                for iv in plan.schedule.intervals],
            "wall_ms": wall_ms,
            "paired": paired,
        }
        if level == "draft" or paired:
            times = sol.times
            rec["series"] = {
                "times": [float(v) for v in
                          times[:plan.normal_forces.shape[1]]],
                "normal_force": plan.normal_forces.tolist(),
                "ee_speed": plan.ee_speeds.tolist(),
                "distance": plan.distances[:, :plan.normal_forces.shape[1]]
                .tolist(),
            }
        self.solve_records.append(rec)

    def tick(self, t: float, x, ref: ReferenceTrajectory) -> PlanBundle:
        """Run whichever levels are due at sim time t; returns the bundle."""
        if t + 1e-9 >= self._next_ci:
            self._run_draft(t, x, ref)
            self._next_ci += self.ci_period
        if t + 1e-9 >= self._next_hybrid:
            self._run_refine(t, x, ref)
            self._next_hybrid += self.hybrid_period
        return self.bundle

    def _run_draft(self, t: float, x, ref: ReferenceTrajectory) -> None:
        guess = None
        if self.bundle.draft is not None:
            guess = _shift_guess(self.bundle.draft.solution, t,
                                 self.ci.ocp.dt)
        started = time.perf_counter()
        plan = self.ci.draft_plan(x, ref, t, guess=guess)
        wall_ms = 1e3 * (time.perf_counter() - started)
        self.ci_count += 1
        if plan.solution.diverged and self.bundle.draft is not None:
            _log.warning("draft solve diverged at t=%.3f; keeping previous",
                         t)
            self._record("draft", t, plan, wall_ms, paired=False)
            return
        self._record("draft", t, plan, wall_ms, paired=False)
        self.bundle = PlanBundle(refined=self.bundle.refined, draft=plan,
                                 schedule=plan.schedule,
                                 used_fallback=self.bundle.used_fallback)
        self._pair_pending = True

    def _run_refine(self, t: float, x, ref: ReferenceTrajectory) -> None:
        if self.bundle.draft is None:
            return
        schedule = self.bundle.schedule
        guess = None
        previous = self.bundle.refined
        if previous is not None:
            same = previous.schedule.approx_equal(schedule,
                                                  self.hybrid.ocp.dt)
            if same:
                guess = _shift_guess(previous.solution, t,
                                     self.hybrid.ocp.dt)
        cold_budget = None
        if guess is None:
            # No shiftable previous solution (first solve, or the schedule
            # changed under us): reseed and give the solver room to work.
            guess = self._seed_from_draft(t)
            cold_budget = self.settings.refine_cold_iterations
        started = time.perf_counter()
        plan = self.hybrid.refine_plan(x, ref, schedule, t, guess=guess,
                                       max_iterations=cold_budget)
        wall_ms = 1e3 * (time.perf_counter() - started)
        self.hybrid_count += 1
        paired = self._pair_pending
        self._pair_pending = False
        fallback = False
        if plan.solution.diverged and previous is not None:
            _log.warning("refine solve diverged at t=%.3f; keeping previous",
                         t)
            fallback = True
            plan = previous
        self._record("refined", t, plan, wall_ms, paired=paired)
        self.bundle = PlanBundle(refined=plan, draft=self.bundle.draft,
                                 schedule=schedule, used_fallback=fallback)

    def _seed_from_draft(self, t: float) -> np.ndarray | None:
        """Map the draft solution onto the hybrid input layout."""
        draft = self.bundle.draft
        if draft is None:
            return None
        n = self.hybrid.ocp.node_count
        dt = self.hybrid.ocp.dt
        guess = np.zeros((n, model.HYBRID_INPUT_DIM))
        flags = self.hybrid.stage_flags(draft.schedule, t)
        d_times = draft.solution.times
        d_dt = d_times[1] - d_times[0]
        for k in range(n):
            tk = t + k * dt
            j = int(np.clip(np.floor((tk - d_times[0]) / d_dt), 0,
                            len(draft.solution.inputs) - 1))
            u_tilde = draft.solution.inputs[j]
            guess[k, model.U_DRIVE] = u_tilde[CI_DRIVE]
            guess[k, model.U_RATES] = u_tilde[CI_RATES]
            # Soft forces along the draft seed the contact-force inputs,
            # but only inside the snapped window; elsewhere the hard mode
            # demands f_c = 0 and a nonzero seed just fights it.
            for arm, sl in ((1, model.U_FC1), (2, model.U_FC2)):
                lam = draft.normal_forces[arm - 1, j]
                if lam > 1e-3 and flags[arm - 1, k] > 0.5:
                    p = draft.ee_positions[arm - 1, j]
                    e_n, e_t, e_z = (np.asarray(v) for v in
                                     self.ci.env.contact_frame(p))
                    aux = u_tilde[CI_AUX][2 * (arm - 1):2 * arm]
                    guess[k, sl] = lam * (e_n + aux[0] * e_t + aux[1] * e_z)
        return guess
