"""Scenario files: strict TOML schema for everything a run needs.

A scenario pins the robot, environment, controller settings, initial
state, reference and scripted events.  Parsing is strict: unknown keys
are rejected with the offending key path in the message, so a typo in a
config cannot silently fall back to a default.

tomli only reads TOML; the emitter here covers the subset this schema
uses (tables, arrays of tables, scalars, lists) so scenarios round-trip
through parse -> serialize -> parse unchanged.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field, fields as dc_fields
from importlib import resources

import numpy as np
import tomli

from . import solver
from .environment import SdfEnvironment, WallSurface
from .contact import SoftContactParams
from .model import InputLimits, RobotParams
from .mpc import (MpcSettings, MpcWeights, ReferenceTrajectory,
                  hold_reference)
from .tracking import GainSet


class ScenarioError(ValueError):
    """Raised for schema violations; message names the key involved."""


_EVENT_KINDS = ("push_disturbance", "spawn_obstacle", "set_goal")
_SCENARIO_KINDS = ("compare", "disturbance", "obstacle", "custom")


@dataclass
class ScriptedEvent:
    """One timed intervention in a run."""

    kind: str
    time: float
    force: list | None = None      # push: world force, N
    duration: float = 0.0          # push: s
    height: float = 0.8            # push: application height, m
    center: list | None = None     # obstacle: 2D box centre, m
    size: list | None = None       # obstacle: 2D box side lengths, m
    goal: list | None = None       # set_goal: 2D target, m
    yaw: float = 0.0               # set_goal: target heading

    def validate(self, duration: float) -> None:
        if self.kind not in _EVENT_KINDS:
            raise ScenarioError(f"events.kind: unknown kind '{self.kind}'")
        if not 0.0 <= self.time <= duration:
            raise ScenarioError(
                f"events.time: {self.time} outside run duration")
        if self.kind == "push_disturbance":
            if self.force is None or len(self.force) != 3:
                raise ScenarioError("events.force: push needs a 3-vector")
            if self.duration <= 0.0:
                raise ScenarioError("events.duration: push needs > 0")
        if self.kind == "spawn_obstacle":
            if self.center is None or len(self.center) != 2:
                raise ScenarioError("events.center: obstacle needs 2 values")
            if self.size is None or len(self.size) != 2 \
                    or min(self.size) <= 0.0:
                raise ScenarioError("events.size: obstacle needs positive "
                                    "side lengths")
        if self.kind == "set_goal":
            if self.goal is None or len(self.goal) != 2:
                raise ScenarioError("events.goal: goal needs 2 values")


@dataclass
class Scenario:
    """Validated scenario; builder methods assemble the runtime objects."""

    name: str
    kind: str
    duration: float
    seed: int = 0
    robot: dict = field(default_factory=dict)
    walls: list = field(default_factory=list)
    initial: dict = field(default_factory=dict)
    reference: dict = field(default_factory=dict)
    contact: dict = field(default_factory=dict)
    mpc: dict = field(default_factory=dict)
    limits: dict = field(default_factory=dict)
    gains: dict = field(default_factory=dict)
    sim: dict = field(default_factory=dict)
    events: list = field(default_factory=list)

    # Builders ----------------------------------------------------------------

    def build_robot(self) -> RobotParams:
        params = RobotParams(**{k: v for k, v in self.robot.items()
                                if k != "body_radius"})
        params.validate()
        return params

    @property
    def body_radius(self) -> float:
        return float(self.robot.get("body_radius", 0.25))

    def build_environment(self) -> SdfEnvironment:
        walls = []
        for w in self.walls:
            extent = tuple(w["extent"]) if "extent" in w else None
            walls.append(WallSurface(
                wall_id=w["id"], point=np.asarray(w["point"], dtype=float),
                inward_normal=np.asarray(w["inward_normal"], dtype=float),
                extent=extent))
        env = SdfEnvironment(walls=walls)
        env.validate()
        return env

    def build_soft(self) -> SoftContactParams:
        soft = SoftContactParams(**self.contact)
        soft.validate()
        return soft

    def build_settings(self) -> MpcSettings:
        top = {k: v for k, v in self.mpc.items()
               if k not in ("weights", "draft_solver", "refine_solver")}
        settings = MpcSettings(**top)
        for name in ("draft_solver", "refine_solver"):
            overrides = self.mpc.get(name, {})
            sub = getattr(settings, name)
            for k, v in overrides.items():
                setattr(sub, k, v)
        settings.validate()
        return settings

    def build_weights(self) -> MpcWeights:
        weights = MpcWeights(**self.mpc.get("weights", {}))
        weights.validate()
        return weights

    def build_limits(self) -> InputLimits:
        limits = InputLimits(**self.limits)
        limits.validate()
        return limits

    def build_gains(self) -> GainSet:
        kwargs = dict(self.gains)
        for key in ("kp_task", "kd_task"):
            if key in kwargs and np.isscalar(kwargs[key]):
                kwargs[key] = float(kwargs[key]) * np.eye(3)
            elif key in kwargs:
                kwargs[key] = np.asarray(kwargs[key], dtype=float)
        for key in ("lean_pid", "velocity_pd", "yaw_pid"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        gains = GainSet(**kwargs)
        gains.validate()
        return gains

    def build_reference(self) -> ReferenceTrajectory | None:
        ref = self.reference
        joints = ref.get("joints")
        if joints is not None:
            joints = np.asarray(joints, dtype=float)
        if "hold" in ref:
            return hold_reference(np.asarray(ref["hold"], dtype=float),
                                  yaw=float(ref.get("yaw", 0.0)),
                                  joints=joints)
        if "waypoints" in ref:
            return ReferenceTrajectory(
                waypoints=np.asarray(ref["waypoints"], dtype=float),
                times=np.asarray(ref["times"], dtype=float),
                yaw=float(ref.get("yaw", 0.0)), joints=joints)
        return None  # goal-driven: the runner plans the path

    @property
    def goal(self) -> np.ndarray | None:
        if "goal" in self.reference:
            return np.asarray(self.reference["goal"], dtype=float)
        return None

    @property
    def cruise_speed(self) -> float:
        return float(self.reference.get("cruise_speed", 0.5))

    def validate(self) -> None:
        if self.kind not in _SCENARIO_KINDS:
            raise ScenarioError(f"scenario.kind: unknown kind '{self.kind}'")
        if self.duration <= 0.0:
            raise ScenarioError("scenario.duration: must be positive")
        modes = [k for k in ("hold", "waypoints", "goal")
                 if k in self.reference]
        if len(modes) != 1:
            raise ScenarioError(
                "reference: exactly one of hold/waypoints/goal required, "
                f"got {modes or 'none'}")
        if "waypoints" in self.reference and "times" not in self.reference:
            raise ScenarioError("reference.times: required with waypoints")
        for key, width in (("position", 2), ("velocity", 2), ("joints", 6)):
            if key in self.initial and len(self.initial[key]) != width:
                raise ScenarioError(
                    f"initial.{key}: expected {width} values")
        for ev in self.events:
            ev.validate(self.duration)
        # Building exercises every sub-validator with key-level messages.
        self.build_robot()
        self.build_environment()
        self.build_soft()
        self.build_settings()
        self.build_weights()
        self.build_limits()
        self.build_gains()


# Schema tables ----------------------------------------------------------------

_ROBOT_KEYS = {"mass", "gravity", "ball_radius", "body_radius"}
_WALL_KEYS = {"id", "point", "inward_normal", "extent"}
_INITIAL_KEYS = {"position", "yaw", "velocity", "joints"}
_REFERENCE_KEYS = {"hold", "waypoints", "times", "yaw", "goal",
                   "cruise_speed", "joints"}
_CONTACT_KEYS = {f.name for f in dc_fields(SoftContactParams)}
_MPC_KEYS = ({f.name for f in dc_fields(MpcSettings)}
             - {"draft_solver", "refine_solver"}) | {"weights",
                                                     "draft_solver",
                                                     "refine_solver"}
_WEIGHT_KEYS = {f.name for f in dc_fields(MpcWeights)}
_SOLVER_KEYS = {f.name for f in dc_fields(solver.SolverSettings)}
_LIMIT_KEYS = {f.name for f in dc_fields(InputLimits)}
_GAIN_KEYS = {"lean_pid", "velocity_pd", "yaw_pid", "kp_task", "kd_task",
              "torque_limit"}
_SIM_KEYS = {"timestep", "k_wall", "c_wall", "rotor_inertia",
             "joint_damping", "arm_point_mass", "noise_position",
             "noise_attitude"}
_EVENT_KEYS = {"kind", "time", "force", "duration", "height", "center",
               "size", "goal", "yaw"}
_SCENARIO_KEYS = {"name", "kind", "duration", "seed"}
_TOP_KEYS = {"scenario", "robot", "environment", "initial", "reference",
             "contact", "mpc", "limits", "gains", "sim", "events"}


def _check_keys(table: dict, allowed: set, path: str) -> None:
    unknown = sorted(set(table) - allowed)
    if unknown:
        raise ScenarioError(f"{path}.{unknown[0]}: unknown key")


def parse(text: str) -> Scenario:
    """Parse and validate a scenario from TOML text."""
    try:
        data = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ScenarioError(f"not valid TOML: {exc}") from exc
    _check_keys(data, _TOP_KEYS, "top level")
    head = data.get("scenario")
    if not isinstance(head, dict):
        raise ScenarioError("scenario: required table missing")
    _check_keys(head, _SCENARIO_KEYS, "scenario")
    for required in ("name", "kind", "duration"):
        if required not in head:
            raise ScenarioError(f"scenario.{required}: required")

    robot = data.get("robot", {})
    _check_keys(robot, _ROBOT_KEYS, "robot")
    env_table = data.get("environment", {})
    _check_keys(env_table, {"walls"}, "environment")
    walls = env_table.get("walls", [])
    for i, w in enumerate(walls):
        _check_keys(w, _WALL_KEYS, f"environment.walls[{i}]")
    initial = data.get("initial", {})
    _check_keys(initial, _INITIAL_KEYS, "initial")
    reference = data.get("reference", {})
    _check_keys(reference, _REFERENCE_KEYS, "reference")
    contact = data.get("contact", {})
    _check_keys(contact, _CONTACT_KEYS, "contact")
    mpc = data.get("mpc", {})
    _check_keys(mpc, _MPC_KEYS, "mpc")
    _check_keys(mpc.get("weights", {}), _WEIGHT_KEYS, "mpc.weights")
    _check_keys(mpc.get("draft_solver", {}), _SOLVER_KEYS,
                "mpc.draft_solver")
    _check_keys(mpc.get("refine_solver", {}), _SOLVER_KEYS,
                "mpc.refine_solver")
    limits = data.get("limits", {})
    _check_keys(limits, _LIMIT_KEYS, "limits")
    gains = data.get("gains", {})
    _check_keys(gains, _GAIN_KEYS, "gains")
    sim = data.get("sim", {})
    _check_keys(sim, _SIM_KEYS, "sim")
    events = []
    for i, ev in enumerate(data.get("events", [])):
        _check_keys(ev, _EVENT_KEYS, f"events[{i}]")
        if "kind" not in ev or "time" not in ev:
            raise ScenarioError(f"events[{i}]: kind and time are required")
        events.append(ScriptedEvent(**ev))

    scenario = Scenario(
        name=str(head["name"]), kind=str(head["kind"]),
        duration=float(head["duration"]), seed=int(head.get("seed", 0)),
        robot=robot, walls=walls, initial=initial, reference=reference,
        contact=contact, mpc=mpc, limits=limits, gains=gains, sim=sim,
        events=events)
    scenario.validate()
    return scenario


def load(path) -> Scenario:
    with open(path, "r", encoding="utf-8") as fh:
        return parse(fh.read())


def shipped_path(name: str):
    """Path of a scenario bundled with the package, by bare name."""
    path = resources.files(__package__) / "scenarios" / f"{name}.toml"
    if not path.is_file():
        shipped = sorted(p.stem for p in
                         (resources.files(__package__) / "scenarios")
                         .iterdir())
        raise ScenarioError(
            f"no shipped scenario '{name}'; available: {', '.join(shipped)}")
    return path


def shipped(name: str) -> Scenario:
    return parse(shipped_path(name).read_text(encoding="utf-8"))


# Emission ----------------------------------------------------------------------

def _fmt_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, (list, tuple, np.ndarray)):
        return "[" + ", ".join(_fmt_value(x) for x in v) + "]"
    raise ScenarioError(f"cannot serialize value of type {type(v).__name__}")


def _emit_table(out: io.StringIO, name: str, table: dict) -> None:
    scalars = {k: v for k, v in table.items() if not isinstance(v, dict)}
    subs = {k: v for k, v in table.items() if isinstance(v, dict)}
    if scalars or not subs:
        out.write(f"[{name}]\n")
        for k, v in scalars.items():
            out.write(f"{k} = {_fmt_value(v)}\n")
        out.write("\n")
    for k, v in subs.items():
        _emit_table(out, f"{name}.{k}", v)


def serialize(scenario: Scenario) -> str:
    out = io.StringIO()
    _emit_table(out, "scenario", {
        "name": scenario.name, "kind": scenario.kind,
        "duration": scenario.duration, "seed": scenario.seed})
    if scenario.robot:
        _emit_table(out, "robot", scenario.robot)
    for w in scenario.walls:
        out.write("[[environment.walls]]\n")
        for k, v in w.items():
            out.write(f"{k} = {_fmt_value(v)}\n")
        out.write("\n")
    for name in ("initial", "reference", "contact", "mpc", "limits",
                 "gains", "sim"):
        table = getattr(scenario, name)
        if table:
            _emit_table(out, name, table)
    for ev in scenario.events:
        out.write("[[events]]\n")
        out.write(f"kind = {_fmt_value(ev.kind)}\n")
        out.write(f"time = {_fmt_value(ev.time)}\n")
        if ev.kind == "push_disturbance":
            out.write(f"force = {_fmt_value(ev.force)}\n")
            out.write(f"duration = {_fmt_value(ev.duration)}\n")
            out.write(f"height = {_fmt_value(ev.height)}\n")
        elif ev.kind == "spawn_obstacle":
            out.write(f"center = {_fmt_value(ev.center)}\n")
            out.write(f"size = {_fmt_value(ev.size)}\n")
        elif ev.kind == "set_goal":
            out.write(f"goal = {_fmt_value(ev.goal)}\n")
            out.write(f"yaw = {_fmt_value(ev.yaw)}\n")
        out.write("\n")
    return out.getvalue()


def save(scenario: Scenario, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(serialize(scenario))
