"""Contact models and contact-schedule handling.

Two force models share the surface frame from the environment:

* a smooth sigmoid of penetration used by the draft planner, which lets
  gradients discover contact without integer mode variables, and
* hard contact-mode constraint residuals (velocity pinning, surface
  attachment, unilateral normal force, friction cones) used by the
  refinement planner once a mode sequence is fixed.

Schedules are extracted from a draft plan by thresholding the smooth
normal force over the horizon and keeping intervals that persist.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import jax.numpy as jnp
import numpy as np

from . import model
from .environment import SdfEnvironment


@dataclass
class SoftContactParams:
    """Parameters of the smooth penetration-to-force curve.

    force = 0.5 * f_max * tanh(-stiffness * (d + offset)) + 0.5 * f_max,
    where d is the signed wall distance: half of f_max at d = -offset,
    saturating at f_max deep inside the wall and at zero away from it.

    Attributes:
        f_max: saturation force, N.
        stiffness: sigmoid slope, 1/m.
        offset: shifts the curve so meaningful force needs penetration, m.
        friction: Coulomb coefficient shared by tangent and vertical axes.
    """

    f_max: float = 40.0
    stiffness: float = 200.0
    offset: float = 0.01
    friction: float = 0.5

    def validate(self) -> None:
        if not self.f_max > 0.0:
            raise ValueError("f_max must be positive")
        if not self.stiffness > 0.0:
            raise ValueError("stiffness must be positive")
        if self.offset < 0.0:
            raise ValueError("offset must be >= 0")
        if not 0.0 < self.friction <= 2.0:
            raise ValueError("friction must be in (0, 2]")


def soft_normal_force(d, params: SoftContactParams):
    """Smooth normal force magnitude as a function of signed distance."""
    return (0.5 * params.f_max
            * jnp.tanh(-params.stiffness * (d + params.offset))
            + 0.5 * params.f_max)


def soft_contact_force(q_b, q_j, arm_index: int, aux,
                       env: SdfEnvironment, params: SoftContactParams,
                       robot: model.RobotParams):
    """World-frame arm force under the smooth contact model.

    ``aux`` holds the two friction ratios (tangent, vertical); the shear
    components are the normal force scaled by them, so the friction cone
    becomes a plain box on ``aux``.
    """
    p = model.forward_kinematics(q_b, q_j, arm_index, robot)
    d = env.sdf(p)
    lam_n = soft_normal_force(d, params)
    e_n, e_t, e_z = env.contact_frame(p)
    aux = jnp.asarray(aux)
    return lam_n * (e_n + aux[0] * e_t + aux[1] * e_z)


def contact_force_components(f_c, p, env: SdfEnvironment):
    """Decompose a world force into (normal, tangent, vertical) at p."""
    e_n, e_t, e_z = env.contact_frame(p)
    f_c = jnp.asarray(f_c)
    return jnp.array([f_c @ e_n, f_c @ e_t, f_c @ e_z])


def complementarity_residual(x, v_j, arm_index: int, env: SdfEnvironment,
                             params: SoftContactParams,
                             robot: model.RobotParams):
    """Force-times-slip residual: zero iff no force or no end-effector motion."""
    x = jnp.asarray(x)
    p = model.forward_kinematics(x[model.QB], x[model.QJ], arm_index, robot)
    lam_n = soft_normal_force(env.sdf(p), params)
    pdot = model.ee_velocity(x, v_j, arm_index, robot)
    return lam_n * jnp.sqrt(jnp.sum(pdot ** 2))


def hybrid_contact_constraints(x, u, arm_index: int, in_contact: bool,
                               env: SdfEnvironment,
                               robot: model.RobotParams,
                               friction: float, lambda_min: float):
    """Hard contact-mode residuals for one arm at one node.

    Returns (equalities, inequalities).  Equalities are satisfied at zero.
    Inequalities are satisfied when nonnegative.

    In contact: the end effector must rest on the surface without sliding,
    press into it with at least ``lambda_min``, and stay inside the
    friction cones.  Out of contact: the arm force is zero and the end
    effector stays in free space.
    """
    x = jnp.asarray(x)
    u = jnp.asarray(u)
    f_c = u[model.U_FC1] if arm_index == 1 else u[model.U_FC2]
    p = model.forward_kinematics(x[model.QB], x[model.QJ], arm_index, robot)
    d = env.sdf(p)
    if not in_contact:
        return f_c, jnp.array([d])
    pdot = model.ee_velocity(x, u[model.U_RATES], arm_index, robot)
    lam = contact_force_components(f_c, p, env)
    eq = jnp.concatenate([pdot, jnp.array([d])])
    ineq = jnp.array([
        lam[0] - lambda_min,
        friction * lam[0] - lam[1],
        friction * lam[0] + lam[1],
        friction * lam[0] - lam[2],
        friction * lam[0] + lam[2],
    ])
    return eq, ineq


# Schedules ------------------------------------------------------------------

@dataclass
class ContactInterval:
    """One planned contact: which arm, when, and against which surface."""

    arm_index: int
    t_start: float
    t_end: float
    wall_id: str | None = None
    peak_force: float = 0.0

    def duration(self) -> float:
        return self.t_end - self.t_start

    def contains(self, t: float) -> bool:
        return self.t_start <= t <= self.t_end


@dataclass
class ContactSchedule:
    """Contact intervals over a planning window."""

    intervals: list = field(default_factory=list)
    horizon: tuple = (0.0, 0.0)

    def active(self, arm_index: int, t: float) -> bool:
        return any(iv.arm_index == arm_index and iv.contains(t)
                   for iv in self.intervals)

    def flags(self, arm_index: int, times) -> np.ndarray:
        """Boolean activity per query time (closed intervals)."""
        times = np.asarray(times)
        out = np.zeros(times.shape, dtype=bool)
        for iv in self.intervals:
            if iv.arm_index == arm_index:
                out |= (times >= iv.t_start - 1e-12) & \
                       (times <= iv.t_end + 1e-12)
        return out

    def clipped(self, t0: float, t1: float) -> "ContactSchedule":
        """Restrict to [t0, t1]; intervals shrink, empty ones drop."""
        kept = []
        for iv in self.intervals:
            a, b = max(iv.t_start, t0), min(iv.t_end, t1)
            if b - a > 1e-12:
                kept.append(ContactInterval(iv.arm_index, a, b, iv.wall_id,
                                            iv.peak_force))
        return ContactSchedule(intervals=kept, horizon=(t0, t1))

    def approx_equal(self, other: "ContactSchedule", tol: float) -> bool:
        """Same intervals up to ``tol`` in the endpoints."""
        if len(self.intervals) != len(other.intervals):
            return False
        key = lambda iv: (iv.arm_index, iv.t_start)
        for a, b in zip(sorted(self.intervals, key=key),
                        sorted(other.intervals, key=key)):
            if a.arm_index != b.arm_index or a.wall_id != b.wall_id:
                return False
            if abs(a.t_start - b.t_start) > tol or \
                    abs(a.t_end - b.t_end) > tol:
                return False
        return True


def extract_schedule(normal_forces, times, threshold: float = 5.0,
                     min_duration: float = 0.5,
                     ee_positions=None,
                     env: SdfEnvironment | None = None) -> ContactSchedule:
    """Threshold a draft plan's normal forces into contact intervals.

    Args:
        normal_forces: (2, n) smooth normal force per arm and node.
        times: (n,) node times, strictly increasing.
        threshold: forces strictly above this count as contact, N.
        min_duration: shorter intervals are discarded, s.
        ee_positions: optional (2, n, 3) node end-effector positions,
            used with ``env`` to tag each interval with the nearest wall.
        env: optional environment for wall tagging.

    An interval that is still active at the final node simply ends there;
    no extrapolation beyond the horizon is attempted.  An interval already
    active at the first node is kept regardless of its remaining length:
    it started before the window, so the minimum-duration rule (which
    filters short spurious contacts) cannot be evaluated for it, and
    dropping it would release an in-progress press.
    """
    normal_forces = np.asarray(normal_forces)
    times = np.asarray(times)
    intervals = []
    for arm in (1, 2):
        above = normal_forces[arm - 1] > threshold
        idx = 0
        n = len(times)
        while idx < n:
            if not above[idx]:
                idx += 1
                continue
            start = idx
            while idx + 1 < n and above[idx + 1]:
                idx += 1
            end = idx
            idx += 1
            if start > 0 and times[end] - times[start] < min_duration:
                continue
            wall_id = None
            if ee_positions is not None and env is not None and env.walls:
                mid = (start + end) // 2
                wall_id = env.nearest_wall_id(ee_positions[arm - 1][mid])
            intervals.append(ContactInterval(
                arm_index=arm,
                t_start=float(times[start]),
                t_end=float(times[end]),
                wall_id=wall_id,
                peak_force=float(np.max(normal_forces[arm - 1,
                                                      start:end + 1]))))
    intervals.sort(key=lambda iv: (iv.t_start, iv.arm_index))
    return ContactSchedule(intervals=intervals,
                           horizon=(float(times[0]), float(times[-1])))
