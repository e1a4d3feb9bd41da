"""Low-level tracking of the refined plan at the simulation rate.

Three controllers share the plan snapshot: a balancing cascade (lean error
feeds a velocity target, velocity error feeds ball force) blended with the
plan's drive feedforward, a yaw PID, and a task-space arm impedance whose
press feedforward comes from the planned contact forces.

The planned contact force is the reaction the wall applies to the hand; the
motors must press the hand the opposite way, so the feedforward enters the
torque map negated.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import jax
import jax.numpy as jnp
import numpy as np

from . import model
from .model import InputLimits, RobotParams

_log = logging.getLogger(__name__)

# First-order filter time constant for the derivative terms, s.
_DERIV_TAU = 0.02
# Integrators may contribute at most this fraction of the output limit.
_WINDUP_FRACTION = 0.2
# Below this smallest singular value the arm Jacobian is treated as
# singular and the clamped torque is flagged.
_SINGULAR_SIGMA = 1e-4


def _wrap_angle(a: float) -> float:
    return float((a + np.pi) % (2.0 * np.pi) - np.pi)


@dataclass
class GainSet:
    """Feedback gains for the three tracking loops.

    lean_pid maps excess lean displacement (m-scaled tilt toward +x/+y)
    to a velocity-target correction; velocity_pd maps velocity error to
    ball drive force; yaw_pid acts on the wrapped heading error.  kp_task
    and kd_task are the task-space impedance matrices.
    """

    lean_pid: tuple = (8.0, 0.5, 0.0)
    velocity_pd: tuple = (60.0, 5.0)
    yaw_pid: tuple = (20.0, 0.0, 2.0)
    kp_task: np.ndarray = field(
        default_factory=lambda: 500.0 * np.eye(3))
    kd_task: np.ndarray = field(
        default_factory=lambda: 20.0 * np.eye(3))
    torque_limit: float = 30.0

    def validate(self) -> None:
        for name in ("lean_pid", "yaw_pid"):
            gains = getattr(self, name)
            if len(gains) != 3 or any(g < 0.0 for g in gains):
                raise ValueError(f"{name} must be three gains >= 0")
        if len(self.velocity_pd) != 2 or any(g < 0.0
                                             for g in self.velocity_pd):
            raise ValueError("velocity_pd must be two gains >= 0")
        for name in ("kp_task", "kd_task"):
            m = np.asarray(getattr(self, name), dtype=float)
            if m.shape != (3, 3) or not np.allclose(m, m.T):
                raise ValueError(f"{name} must be symmetric 3x3")
            if np.any(np.linalg.eigvalsh(m) <= 0.0):
                raise ValueError(f"{name} must be positive definite")
        if self.torque_limit <= 0.0:
            raise ValueError("torque_limit must be positive")


@dataclass
class TrackingCommand:
    """What the plant receives each control step."""

    drive: np.ndarray          # [f_x, f_y, tau_yaw]
    joint_torques: np.ndarray  # (6,)
    stale: bool = False
    singular: bool = False


def _build_arm_core(robot: RobotParams):
    """Jitted impedance torque for both arms.

    Returns (torques, smallest-singular-values) so the caller can flag
    near-singular configurations without a second trace.
    """

    def core(x_hat, qj_rates, qj_ref, fc_world, kp, kd):
        q_b = x_hat[model.QB]
        q_j = x_hat[model.QJ]
        r_wb = model.euler_zyx_to_matrix(q_b[2:5])
        tau = jnp.zeros(6)
        sigmas = []
        fnorms = []
        for arm in (1, 2):
            jac = model.ee_jacobian(q_b, q_j, arm, robot)
            p = model.forward_kinematics_body(q_j, arm, robot)
            p_ref = model.forward_kinematics_body(qj_ref, arm, robot)
            pdot = jac @ qj_rates
            f_imp = kp @ (p_ref - p) - kd @ pdot
            f_press = -(r_wb.T @ fc_world[arm - 1])
            f_cmd = f_imp + f_press
            tau = tau + jac.T @ f_cmd
            own = jac[:, model._arm_slice(arm)]
            sigmas.append(jnp.min(jnp.linalg.svd(own, compute_uv=False)))
            fnorms.append(jnp.linalg.norm(f_cmd))
        return tau, jnp.stack(sigmas), jnp.stack(fnorms)

    return jax.jit(core)


class TrackingController:
    """Stateful loops around the active plan; one instance per control task.

    The only state is the integrators and derivative filters, so the
    controller is deterministic for a given call sequence.
    """

    def __init__(self, gains: GainSet, limits: InputLimits,
                 robot: RobotParams, period: float,
                 staleness_limit: float = 0.5):
        gains.validate()
        limits.validate()
        if period <= 0.0:
            raise ValueError("period must be positive")
        self.gains = gains
        self.limits = limits
        self.robot = robot
        self.period = period
        self.staleness_limit = staleness_limit
        self._arm_core = _build_arm_core(robot)
        self._base_rates = jax.jit(
            lambda h, qb: model.base_rates(h, qb, robot))
        self._alpha = period / (period + _DERIV_TAU)
        self.reset()

    def reset(self) -> None:
        self._lean_int = np.zeros(2)
        self._yaw_int = 0.0
        self._prev_lean_err = None
        self._prev_vel_err = None
        self._prev_yaw_err = None
        self._lean_deriv = np.zeros(2)
        self._vel_deriv = np.zeros(2)
        self._yaw_deriv = 0.0

    # Plan sampling -----------------------------------------------------------

    def _plan_targets(self, t: float, bundle):
        sol = bundle.active_solution() if bundle is not None else None
        if sol is None:
            return None, np.zeros(model.HYBRID_INPUT_DIM), True
        stale = (t - float(sol.times[0])) > self.staleness_limit
        x_ref = sol.state_at(t)
        u_ff = sol.input_at(t)
        if u_ff.shape[0] != model.HYBRID_INPUT_DIM:
            # Draft-level fallback plan: map the smooth input layout over.
            mapped = np.zeros(model.HYBRID_INPUT_DIM)
            mapped[model.U_DRIVE] = u_ff[0:3]
            mapped[model.U_RATES] = u_ff[3:9]
            u_ff = mapped
        if stale:
            u_ff = np.zeros(model.HYBRID_INPUT_DIM)
        return x_ref, u_ff, stale

    # Balancing cascade and yaw ------------------------------------------------

    def body_control(self, t: float, x_hat, bundle) -> tuple:
        """Ball drive command [f_x, f_y, tau_yaw] and the staleness flag."""
        x_hat = np.asarray(x_hat)
        x_ref, u_ff, stale = self._plan_targets(t, bundle)
        if x_ref is None:
            x_ref = np.zeros(model.STATE_DIM)
            x_ref[5:7] = x_hat[5:7]
            x_ref[7] = x_hat[7]

        v_meas = np.asarray(self._base_rates(x_hat[model.H],
                                             x_hat[model.QB]))[0:2]
        v_ref = np.asarray(self._base_rates(x_ref[model.H],
                                            x_ref[model.QB]))[0:2]

        # Small-angle lean displacement toward +x/+y: (pitch, -roll).
        lean_meas = np.array([x_hat[8], -x_hat[9]])
        lean_ref = np.array([x_ref[8], -x_ref[9]])
        # Excess lean demands catching up underneath the CoM.
        lean_err = lean_meas - lean_ref
        kp_l, ki_l, kd_l = self.gains.lean_pid
        self._lean_int += lean_err * self.period
        if ki_l > 0.0:
            cap = _WINDUP_FRACTION * self.limits.drive_force / ki_l
            self._lean_int = np.clip(self._lean_int, -cap, cap)
        self._lean_deriv = self._filtered(self._lean_deriv, lean_err,
                                          self._prev_lean_err)
        self._prev_lean_err = lean_err
        v_target = v_ref + kp_l * lean_err + ki_l * self._lean_int \
            + kd_l * self._lean_deriv

        kp_v, kd_v = self.gains.velocity_pd
        vel_err = v_target - v_meas
        self._vel_deriv = self._filtered(self._vel_deriv, vel_err,
                                         self._prev_vel_err)
        self._prev_vel_err = vel_err
        f_xy = u_ff[model.U_DRIVE][0:2] + kp_v * vel_err \
            + kd_v * self._vel_deriv

        yaw_err = _wrap_angle(float(x_ref[7] - x_hat[7]))
        kp_y, ki_y, kd_y = self.gains.yaw_pid
        self._yaw_int += yaw_err * self.period
        if ki_y > 0.0:
            cap = _WINDUP_FRACTION * self.limits.drive_torque / ki_y
            self._yaw_int = float(np.clip(self._yaw_int, -cap, cap))
        self._yaw_deriv = self._filtered(self._yaw_deriv, yaw_err,
                                         self._prev_yaw_err)
        self._prev_yaw_err = yaw_err
        tau_yaw = u_ff[model.U_DRIVE][2] + kp_y * yaw_err \
            + ki_y * self._yaw_int + kd_y * self._yaw_deriv

        drive = np.array([
            np.clip(f_xy[0], -self.limits.drive_force,
                    self.limits.drive_force),
            np.clip(f_xy[1], -self.limits.drive_force,
                    self.limits.drive_force),
            np.clip(tau_yaw, -self.limits.drive_torque,
                    self.limits.drive_torque)])
        return drive, stale

    def _filtered(self, state, err, prev):
        if prev is None:
            return np.zeros_like(np.asarray(err, dtype=float))
        raw = (np.asarray(err) - np.asarray(prev)) / self.period
        return (1.0 - self._alpha) * np.asarray(state) + self._alpha * raw

    # Arm impedance -----------------------------------------------------------

    def arm_control(self, t: float, x_hat, qj_rates, bundle) -> tuple:
        """Joint torques (6,) and a near-singularity flag."""
        x_hat = np.asarray(x_hat)
        x_ref, u_ff, stale = self._plan_targets(t, bundle)
        qj_ref = x_hat[model.QJ] if x_ref is None else x_ref[model.QJ]
        fc = np.stack([u_ff[model.U_FC1], u_ff[model.U_FC2]])
        tau, sigmas, fnorms = self._arm_core(
            jnp.asarray(x_hat), jnp.asarray(qj_rates), jnp.asarray(qj_ref),
            jnp.asarray(fc), jnp.asarray(self.gains.kp_task),
            jnp.asarray(self.gains.kd_task))
        tau = np.asarray(tau)
        # The hanging rest posture is rank-deficient but harmless; only a
        # real force demand through a degenerate Jacobian is worth flagging.
        singular = bool(np.any((np.asarray(sigmas) < _SINGULAR_SIGMA)
                               & (np.asarray(fnorms) > 1.0)))
        if singular:
            _log.debug("arm Jacobian near singular at t=%.3f", t)
        tau = np.clip(tau, -self.gains.torque_limit,
                      self.gains.torque_limit)
        return tau, singular

    def command(self, t: float, x_hat, qj_rates,
                bundle) -> TrackingCommand:
        """One control step: both loops against the same plan snapshot."""
        drive, stale = self.body_control(t, x_hat, bundle)
        tau, singular = self.arm_control(t, x_hat, qj_rates, bundle)
        return TrackingCommand(drive=drive, joint_torques=tau, stale=stale,
                               singular=singular)
