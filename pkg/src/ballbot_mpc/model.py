"""Rigid-body model of a ball-balancing robot with two 3-DoF arms.

The base is a single rigid body balancing on a ball.  Its configuration is
``q_b = [p_x, p_y, yaw, pitch, roll]`` (ZYX Euler angles, world frame) and
its momentum coordinates are ``h = [h_x, h_y, l_x, l_y, l_z]``: planar
linear momentum of the centre of mass followed by the spin angular momentum
of the body.  Arms contribute kinematics only; their joints are treated as
velocity-controlled in the planner and as torque-driven rotors in the
ground-truth simulator.

State vector (16):   x   = [h (5), q_b (5), q_j (6)]
Hybrid input (15):   u   = [f_drive (3: fx, fy, tau_yaw), f_c right (3),
                            f_c left (3), joint rates (6)]

The momentum map is ``h = A(q_b) @ q_b_dot`` with the block-triangular

    A = [[m*I2, -m*P_xy @ skew(R r_com) @ E(angles)],
         [0,    (R I_body R^T) @ E(angles)]]

where ``E`` maps ZYX Euler rates to the world angular velocity.  Momentum
rates follow Newton/Euler about the ball centre; the vertical acceleration
of the centre of mass is dropped from the gyroscopic term (it is second
order in lean rate for this geometry).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import jax
import jax.numpy as jnp
import numpy as np

from .errors import WorkspaceLimitError

# State / input layout ------------------------------------------------------

STATE_DIM = 16
HYBRID_INPUT_DIM = 15

H = slice(0, 5)          # [h_x, h_y, l_x, l_y, l_z]
QB = slice(5, 10)        # [p_x, p_y, yaw, pitch, roll]
QJ = slice(10, 16)       # right arm (3), left arm (3)

U_DRIVE = slice(0, 3)    # [f_x, f_y, tau_yaw]
U_FC1 = slice(3, 6)      # world-frame contact force, right arm
U_FC2 = slice(6, 9)      # world-frame contact force, left arm
U_RATES = slice(9, 15)   # commanded joint rates

# Lean guard: beyond this pitch/roll the Euler-rate map is too close to
# singular to trust and the physical robot would have fallen anyway.
MAX_LEAN_RAD = np.deg2rad(80.0)


@dataclass
class RobotParams:
    """Geometric and inertial parameters.

    Attributes:
        mass: body mass in kg (ball mass folded in).
        inertia: 3x3 body-frame inertia about the centre of mass, kg m^2.
        com_offset: centre of mass relative to the ball centre, body frame, m.
        ball_radius: m; the ball centre sits this high above the floor.
        gravity: magnitude, m/s^2.
        shoulder_offsets: (2, 3) shoulder mount points relative to the ball
            centre, body frame; row 0 is the right arm, row 1 the left.
        joint_axes: (3, 3) rows are the rotation axes of the three arm
            joints at zero configuration (shared by both arms).
        link_lengths: (2,) upper arm and forearm lengths, m.
    """

    mass: float = 35.0
    inertia: np.ndarray = field(
        default_factory=lambda: np.diag([3.4, 3.4, 0.7]))
    com_offset: np.ndarray = field(
        default_factory=lambda: np.array([0.0, 0.0, 0.45]))
    ball_radius: float = 0.11
    gravity: float = 9.81
    shoulder_offsets: np.ndarray = field(
        default_factory=lambda: np.array([[0.0, -0.18, 0.9],
                                          [0.0, 0.18, 0.9]]))
    joint_axes: np.ndarray = field(
        default_factory=lambda: np.array([[0.0, 1.0, 0.0],
                                          [1.0, 0.0, 0.0],
                                          [0.0, 1.0, 0.0]]))
    link_lengths: np.ndarray = field(
        default_factory=lambda: np.array([0.25, 0.25]))

    def __post_init__(self) -> None:
        self.inertia = np.asarray(self.inertia, dtype=float)
        self.com_offset = np.asarray(self.com_offset, dtype=float)
        self.shoulder_offsets = np.asarray(self.shoulder_offsets, dtype=float)
        self.joint_axes = np.asarray(self.joint_axes, dtype=float)
        self.link_lengths = np.asarray(self.link_lengths, dtype=float)

    def validate(self) -> None:
        """Raise ValueError on physically meaningless parameters."""
        if not self.mass > 0.0:
            raise ValueError("mass must be positive")
        if self.inertia.shape != (3, 3):
            raise ValueError("inertia must be 3x3")
        if not np.allclose(self.inertia, self.inertia.T, atol=1e-12):
            raise ValueError("inertia must be symmetric")
        if np.any(np.linalg.eigvalsh(self.inertia) <= 0.0):
            raise ValueError("inertia must be positive definite")
        if not self.ball_radius > 0.0:
            raise ValueError("ball_radius must be positive")
        if not self.gravity > 0.0:
            raise ValueError("gravity must be positive")
        if self.shoulder_offsets.shape != (2, 3):
            raise ValueError("shoulder_offsets must be (2, 3)")
        if self.joint_axes.shape != (3, 3):
            raise ValueError("joint_axes must be (3, 3)")
        norms = np.linalg.norm(self.joint_axes, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-9):
            raise ValueError("joint_axes rows must be unit vectors")
        if self.link_lengths.shape != (2,) or np.any(self.link_lengths <= 0):
            raise ValueError("link_lengths must be two positive lengths")


@dataclass
class InputLimits:
    """Box limits on the planner/controller inputs (symmetric about zero)."""

    drive_force: float = 60.0      # N, per horizontal axis
    drive_torque: float = 10.0     # N m, yaw
    joint_rate: float = 3.0        # rad/s, per joint
    contact_force: float = 60.0    # N, per world axis of each arm force

    def validate(self) -> None:
        for name in ("drive_force", "drive_torque", "joint_rate",
                     "contact_force"):
            if not getattr(self, name) > 0.0:
                raise ValueError(f"{name} must be positive")

    def hybrid_bounds(self) -> np.ndarray:
        """Per-component bound for the 15-dim hybrid input vector."""
        return np.array(
            [self.drive_force, self.drive_force, self.drive_torque]
            + [self.contact_force] * 6 + [self.joint_rate] * 6)


# Rotations -----------------------------------------------------------------

def skew(v):
    """3x3 cross-product matrix: skew(a) @ b == cross(a, b)."""
    v = jnp.asarray(v)
    return jnp.array([[0.0, -v[2], v[1]],
                      [v[2], 0.0, -v[0]],
                      [-v[1], v[0], 0.0]])


def rotation_about_axis(axis, angle):
    """Rodrigues rotation about a unit axis."""
    axis = jnp.asarray(axis)
    k = skew(axis)
    s, c = jnp.sin(angle), jnp.cos(angle)
    return jnp.eye(3) + s * k + (1.0 - c) * (k @ k)


def euler_zyx_to_matrix(angles):
    """World-from-body rotation for ZYX Euler angles [yaw, pitch, roll]."""
    psi, theta, phi = angles[0], angles[1], angles[2]
    cz, sz = jnp.cos(psi), jnp.sin(psi)
    cy, sy = jnp.cos(theta), jnp.sin(theta)
    cx, sx = jnp.cos(phi), jnp.sin(phi)
    rz = jnp.array([[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]])
    ry = jnp.array([[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]])
    rx = jnp.array([[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]])
    return rz @ ry @ rx


def euler_rate_map(angles):
    """Matrix E with world angular velocity = E(angles) @ [yaw', pitch', roll'].

    Columns are the world-frame axes each Euler rate rotates about:
    z, then y carried by the yaw rotation, then x carried by yaw and pitch.
    Singular at |pitch| = pi/2.
    """
    psi, theta = angles[0], angles[1]
    cz, sz = jnp.cos(psi), jnp.sin(psi)
    cy, sy = jnp.cos(theta), jnp.sin(theta)
    col_psi = jnp.array([0.0, 0.0, 1.0])
    col_theta = jnp.array([-sz, cz, 0.0])
    col_phi = jnp.array([cz * cy, sz * cy, -sy])
    return jnp.stack([col_psi, col_theta, col_phi], axis=1)


# Momentum map --------------------------------------------------------------

def _centroidal_blocks(q_b, params: RobotParams):
    """Return (B, C): h_lin = m*p_dot_xy + B @ euler_rates, l = C @ euler_rates."""
    angles = q_b[2:5]
    r = euler_zyx_to_matrix(angles)
    e = euler_rate_map(angles)
    r_com_w = r @ jnp.asarray(params.com_offset)
    i_world = r @ jnp.asarray(params.inertia) @ r.T
    b = -params.mass * (skew(r_com_w) @ e)[0:2, :]
    c = i_world @ e
    return b, c


def centroidal_matrix(q_b, params: RobotParams):
    """5x5 map from base-coordinate rates to momentum coordinates h."""
    b, c = _centroidal_blocks(q_b, params)
    top = jnp.concatenate([params.mass * jnp.eye(2), b], axis=1)
    bottom = jnp.concatenate([jnp.zeros((3, 2)), c], axis=1)
    return jnp.concatenate([top, bottom], axis=0)


def base_rates(h, q_b, params: RobotParams):
    """Invert the momentum map: q_b_dot from momentum coordinates.

    Uses the block-triangular structure; only a 3x3 solve is needed.
    """
    b, c = _centroidal_blocks(q_b, params)
    euler_rates = jnp.linalg.solve(c, h[2:5])
    p_dot = (h[0:2] - b @ euler_rates) / params.mass
    return jnp.concatenate([p_dot, euler_rates])


def momentum_coordinates(q_b, qb_dot, params: RobotParams):
    """Forward momentum map h = A(q_b) @ q_b_dot."""
    return centroidal_matrix(q_b, params) @ jnp.asarray(qb_dot)


def check_workspace(x) -> None:
    """Raise WorkspaceLimitError if the lean is outside the trusted range."""
    pitch = float(x[8])
    roll = float(x[9])
    if max(abs(pitch), abs(roll)) >= MAX_LEAN_RAD:
        raise WorkspaceLimitError(
            f"lean out of range: pitch={pitch:.3f} rad, roll={roll:.3f} rad")


# Arm kinematics ------------------------------------------------------------

def _arm_slice(arm_index: int) -> slice:
    if arm_index not in (1, 2):
        raise ValueError(f"arm_index must be 1 (right) or 2 (left), "
                         f"got {arm_index}")
    return slice(0, 3) if arm_index == 1 else slice(3, 6)


def forward_kinematics_body(q_j, arm_index: int, params: RobotParams):
    """End-effector position in the body frame (origin: ball centre)."""
    q = jnp.asarray(q_j)[_arm_slice(arm_index)]
    axes = jnp.asarray(params.joint_axes)
    l1, l2 = params.link_lengths[0], params.link_lengths[1]
    shoulder = jnp.asarray(params.shoulder_offsets[arm_index - 1])
    r1 = rotation_about_axis(axes[0], q[0])
    r2 = rotation_about_axis(axes[1], q[1])
    r3 = rotation_about_axis(axes[2], q[2])
    upper = jnp.array([0.0, 0.0, -l1])
    fore = jnp.array([0.0, 0.0, -l2])
    return shoulder + r1 @ r2 @ (upper + r3 @ fore)


def forward_kinematics(q_b, q_j, arm_index: int, params: RobotParams):
    """End-effector position in the world frame."""
    q_b = jnp.asarray(q_b)
    base = jnp.array([q_b[0], q_b[1], params.ball_radius])
    r = euler_zyx_to_matrix(q_b[2:5])
    return base + r @ forward_kinematics_body(q_j, arm_index, params)


def ee_jacobian(q_b, q_j, arm_index: int, params: RobotParams):
    """3x6 Jacobian of the body-frame end-effector position w.r.t. q_j.

    Columns for the other arm's joints are zero.  ``q_b`` is accepted for
    signature symmetry with :func:`forward_kinematics` but does not enter;
    the body-frame position depends on the arm joints alone.
    """
    del q_b
    fn = lambda q: forward_kinematics_body(q, arm_index, params)
    return jax.jacfwd(fn)(jnp.asarray(q_j))


def ee_velocity(x, v_j, arm_index: int, params: RobotParams):
    """World-frame end-effector velocity for state x and joint rates v_j."""
    x = jnp.asarray(x)
    qb_dot = base_rates(x[H], x[QB], params)
    fn = lambda qb, qj: forward_kinematics(qb, qj, arm_index, params)
    _, pdot = jax.jvp(fn, (x[QB], x[QJ]), (qb_dot, jnp.asarray(v_j)))
    return pdot


# Dynamics ------------------------------------------------------------------

def momentum_rates(x, f_drive, ee_forces, ee_positions,
                   extra_points=None, extra_forces=None,
                   params: RobotParams = None):
    """Newton/Euler momentum rates about the ball centre.

    Args:
        x: 16-dim state.
        f_drive: [f_x, f_y, tau_yaw] ball-drive input.
        ee_forces: (2, 3) world forces applied to the body at the arms.
        ee_positions: (2, 3) world end-effector positions.
        extra_points: optional (k, 3) world application points of extra
            forces (disturbances), measured absolutely.
        extra_forces: optional (k, 3) world extra forces.

    Returns:
        (5,) rate of the momentum coordinates h.
    """
    x = jnp.asarray(x)
    q_b = x[QB]
    ball = jnp.array([q_b[0], q_b[1], params.ball_radius])
    r = euler_zyx_to_matrix(q_b[2:5])
    r_com_w = r @ jnp.asarray(params.com_offset)

    f_total = ee_forces[0] + ee_forces[1]
    torque = (jnp.cross(ee_positions[0] - ball, ee_forces[0])
              + jnp.cross(ee_positions[1] - ball, ee_forces[1]))
    if extra_points is not None:
        f_total = f_total + jnp.sum(extra_forces, axis=0)
        torque = torque + jnp.sum(
            jnp.cross(extra_points - ball, extra_forces), axis=0)

    f_xy = f_total[0:2] + f_drive[0:2]
    # Planar CoM acceleration from the same force balance; the vertical
    # component is dropped (second order in lean rate).
    accel = jnp.array([f_xy[0], f_xy[1], 0.0]) / params.mass
    g_vec = jnp.array([0.0, 0.0, -params.gravity])
    torque = (torque + jnp.cross(r_com_w, params.mass * (g_vec - accel))
              + jnp.array([0.0, 0.0, f_drive[2]]))
    return jnp.concatenate([f_xy, torque])


def dynamics(x, u, contact_positions, params: RobotParams):
    """State derivative for the hybrid input parameterisation.

    Args:
        x: 16-dim state.
        u: 15-dim input [f_drive, f_c right, f_c left, joint rates].
        contact_positions: (2, 3) world points where the arm forces act.
        params: robot parameters.

    Returns:
        16-dim state rate.  Joint coordinates integrate the commanded
        rates directly (the planner's velocity-controlled arm model).
    """
    x = jnp.asarray(x)
    u = jnp.asarray(u)
    ee_forces = jnp.stack([u[U_FC1], u[U_FC2]])
    h_dot = momentum_rates(x, u[U_DRIVE], ee_forces,
                           jnp.asarray(contact_positions), params=params)
    qb_dot = base_rates(x[H], x[QB], params)
    return jnp.concatenate([h_dot, qb_dot, u[U_RATES]])


def upright_state(p_xy=(0.0, 0.0), yaw=0.0, q_j=None,
                  velocity_xy=(0.0, 0.0), params: RobotParams = None):
    """Assemble a balanced state at rest or with an initial CoM velocity."""
    if params is None:
        params = RobotParams()
    q_b = np.array([p_xy[0], p_xy[1], yaw, 0.0, 0.0])
    qb_dot = np.array([velocity_xy[0], velocity_xy[1], 0.0, 0.0, 0.0])
    h = np.asarray(momentum_coordinates(q_b, qb_dot, params))
    joints = np.zeros(6) if q_j is None else np.asarray(q_j, dtype=float)
    return np.concatenate([h, q_b, joints])
