"""Model-layer checks against hand-derived values and finite differences.

The finite-difference helpers here are deliberately independent of the
package: they differentiate smooth coordinate paths directly, so momentum
and velocity maps are validated against their defining derivatives rather
than against the code under test.
"""

import numpy as np
import pytest

from ballbot_mpc import model
from ballbot_mpc.errors import WorkspaceLimitError


def rotation_zyx_reference(psi, theta, phi):
    """Closed-form ZYX rotation matrix, written out entry by entry."""
    cz, sz = np.cos(psi), np.sin(psi)
    cy, sy = np.cos(theta), np.sin(theta)
    cx, sx = np.cos(phi), np.sin(phi)
    return np.array([
        [cz * cy, cz * sy * sx - sz * cx, cz * sy * cx + sz * sx],
        [sz * cy, sz * sy * sx + cz * cx, sz * sy * cx - cz * sx],
        [-sy, cy * sx, cy * cx],
    ])


def central_difference(f, t, eps=1e-6):
    return (np.asarray(f(t + eps)) - np.asarray(f(t - eps))) / (2.0 * eps)


@pytest.fixture(scope="module")
def params():
    p = model.RobotParams()
    p.validate()
    return p


def test_rotation_matches_reference():
    rng = np.random.RandomState(11)
    for _ in range(25):
        angles = rng.uniform(-1.2, 1.2, size=3)
        r = np.asarray(model.euler_zyx_to_matrix(angles))
        expected = rotation_zyx_reference(*angles)
        np.testing.assert_allclose(r, expected, atol=1e-12)
        np.testing.assert_allclose(r @ r.T, np.eye(3), atol=1e-12)
        assert np.linalg.det(r) == pytest.approx(1.0, abs=1e-12)


def test_skew_is_cross_product():
    rng = np.random.RandomState(3)
    a, b = rng.randn(3), rng.randn(3)
    np.testing.assert_allclose(
        np.asarray(model.skew(a)) @ b, np.cross(a, b), atol=1e-14)


def test_euler_rate_map_against_rotation_derivative():
    # Angular velocity from dR/dt R^T must match E(angles) @ angle rates.
    rng = np.random.RandomState(7)
    for _ in range(10):
        base = rng.uniform(-0.8, 0.8, size=3)
        rates = rng.uniform(-1.0, 1.0, size=3)

        def rot_path(t):
            return np.asarray(model.euler_zyx_to_matrix(base + rates * t))

        r_dot = central_difference(rot_path, 0.0)
        omega_mat = r_dot @ rot_path(0.0).T
        omega_fd = np.array(
            [omega_mat[2, 1], omega_mat[0, 2], omega_mat[1, 0]])
        omega = np.asarray(model.euler_rate_map(base)) @ rates
        np.testing.assert_allclose(omega, omega_fd, atol=1e-7)


def test_momentum_map_against_com_and_spin_derivatives(params):
    # h = [m * d/dt(com position)_xy, (R I R^T) omega], both built from
    # finite differences of the configuration path.
    rng = np.random.RandomState(19)
    for _ in range(10):
        q0 = np.concatenate([rng.uniform(-1, 1, 2),
                             rng.uniform(-0.6, 0.6, 3)])
        qdot = rng.uniform(-1, 1, 5)

        def com_path(t):
            q = q0 + qdot * t
            r = np.asarray(model.euler_zyx_to_matrix(q[2:5]))
            return np.array([q[0], q[1], 0.0]) + r @ params.com_offset

        def rot_path(t):
            return np.asarray(model.euler_zyx_to_matrix((q0 + qdot * t)[2:5]))

        v_com = central_difference(com_path, 0.0)
        r_dot = central_difference(rot_path, 0.0)
        omega_mat = r_dot @ rot_path(0.0).T
        omega = np.array([omega_mat[2, 1], omega_mat[0, 2], omega_mat[1, 0]])
        r = rot_path(0.0)
        expected = np.concatenate(
            [params.mass * v_com[:2], r @ params.inertia @ r.T @ omega])

        h = np.asarray(model.momentum_coordinates(q0, qdot, params))
        np.testing.assert_allclose(h, expected, rtol=1e-6, atol=1e-6)


def test_base_rates_inverts_momentum_map(params):
    rng = np.random.RandomState(23)
    for _ in range(20):
        q_b = np.concatenate([rng.uniform(-2, 2, 2),
                              rng.uniform(-0.9, 0.9, 3)])
        qdot = rng.uniform(-2, 2, 5)
        h = np.asarray(model.momentum_coordinates(q_b, qdot, params))
        back = np.asarray(model.base_rates(h, q_b, params))
        np.testing.assert_allclose(back, qdot, rtol=1e-9, atol=1e-9)


def test_forward_kinematics_hand_values(params):
    z = np.zeros(6)
    # Arms hang straight down from the shoulders at zero configuration.
    np.testing.assert_allclose(
        np.asarray(model.forward_kinematics_body(z, 1, params)),
        [0.0, -0.18, 0.4], atol=1e-12)
    np.testing.assert_allclose(
        np.asarray(model.forward_kinematics_body(z, 2, params)),
        [0.0, 0.18, 0.4], atol=1e-12)
    # Shoulder pitch by 90 deg points the right arm forward.
    q = np.array([np.pi / 2, 0, 0, 0, 0, 0])
    np.testing.assert_allclose(
        np.asarray(model.forward_kinematics_body(q, 1, params)),
        [-0.5, -0.18, 0.9], atol=1e-12)
    # Elbow bend only moves the forearm.
    q = np.array([0, 0, np.pi / 2, 0, 0, 0])
    np.testing.assert_allclose(
        np.asarray(model.forward_kinematics_body(q, 1, params)),
        [-0.25, -0.18, 0.65], atol=1e-12)
    # Shoulder roll of +90 deg swings the right hand across the body.
    q = np.array([0, np.pi / 2, 0, 0, 0, 0])
    np.testing.assert_allclose(
        np.asarray(model.forward_kinematics_body(q, 1, params)),
        [0.0, 0.32, 0.9], atol=1e-12)


def test_forward_kinematics_world_frame(params):
    q_b = np.array([1.0, 2.0, np.pi / 2, 0.0, 0.0])
    p = np.asarray(model.forward_kinematics(q_b, np.zeros(6), 1, params))
    # Yaw of 90 deg maps body [0, -0.18, 0.4] to world [0.18, 0, 0.4].
    np.testing.assert_allclose(p, [1.18, 2.0, 0.51], atol=1e-12)


def test_arm_index_validation(params):
    with pytest.raises(ValueError):
        model.forward_kinematics_body(np.zeros(6), 0, params)
    with pytest.raises(ValueError):
        model.forward_kinematics_body(np.zeros(6), 3, params)


def test_ee_jacobian_against_central_differences(params):
    rng = np.random.RandomState(31)
    eps = 1e-6
    for arm in (1, 2):
        for _ in range(8):
            q = rng.uniform(-1.0, 1.0, 6)
            jac = np.asarray(model.ee_jacobian(None, q, arm, params))
            fd = np.zeros((3, 6))
            for i in range(6):
                dq = np.zeros(6)
                dq[i] = eps
                hi = np.asarray(
                    model.forward_kinematics_body(q + dq, arm, params))
                lo = np.asarray(
                    model.forward_kinematics_body(q - dq, arm, params))
                fd[:, i] = (hi - lo) / (2 * eps)
            np.testing.assert_allclose(jac, fd, atol=1e-8)


def test_ee_jacobian_rank_drops_at_full_stretch(params):
    # Straight-down arm: motion along the arm axis is unreachable.
    jac = np.asarray(model.ee_jacobian(None, np.zeros(6), 1, params))
    assert np.linalg.matrix_rank(jac, tol=1e-9) == 2
    # A bent elbow restores rank 3.
    q = np.array([0.3, 0.2, 0.9, 0, 0, 0])
    jac = np.asarray(model.ee_jacobian(None, q, 1, params))
    assert np.linalg.matrix_rank(jac, tol=1e-9) == 3


def test_ee_velocity_against_state_path_derivative(params):
    rng = np.random.RandomState(43)
    for _ in range(6):
        q_b = np.concatenate([rng.uniform(-1, 1, 2),
                              rng.uniform(-0.5, 0.5, 3)])
        q_j = rng.uniform(-0.8, 0.8, 6)
        qb_dot = rng.uniform(-1, 1, 5)
        v_j = rng.uniform(-1, 1, 6)
        h = np.asarray(model.momentum_coordinates(q_b, qb_dot, params))
        x = np.concatenate([h, q_b, q_j])

        def ee_path(t):
            return np.asarray(model.forward_kinematics(
                q_b + qb_dot * t, q_j + v_j * t, 1, params))

        expected = central_difference(ee_path, 0.0)
        got = np.asarray(model.ee_velocity(x, v_j, 1, params))
        np.testing.assert_allclose(got, expected, rtol=1e-6, atol=1e-7)


def test_upright_state_is_equilibrium(params):
    x = model.upright_state(params=params)
    u = np.zeros(model.HYBRID_INPUT_DIM)
    ee = np.stack([
        np.asarray(model.forward_kinematics(x[model.QB], x[model.QJ], 1,
                                            params)),
        np.asarray(model.forward_kinematics(x[model.QB], x[model.QJ], 2,
                                            params)),
    ])
    xdot = np.asarray(model.dynamics(x, u, ee, params))
    np.testing.assert_allclose(xdot, np.zeros(16), atol=1e-12)


def test_momentum_rates_hand_value(params):
    # Rest state, single lateral force at a known point.  The CoM sits at
    # absolute height ball_radius + 0.45 = 0.56 m, the force acts at
    # 0.8 m, so the spin rate is the torque about the CoM: 0.24 m x 10 N,
    # pitching backwards.
    x = model.upright_state(params=params)
    ee_forces = np.array([[-10.0, 0.0, 0.0], [0.0, 0.0, 0.0]])
    ee_pos = np.array([[0.5, 0.0, 0.8], [0.0, 0.0, 0.0]])
    h_dot = np.asarray(model.momentum_rates(
        x, np.zeros(3), ee_forces, ee_pos, params=params))
    np.testing.assert_allclose(h_dot[:2], [-10.0, 0.0], atol=1e-12)
    np.testing.assert_allclose(h_dot[2:], [0.0, -2.4, 0.0], atol=1e-12)


def test_check_workspace(params):
    x = model.upright_state(params=params)
    model.check_workspace(x)
    x[8] = np.deg2rad(81.0)
    with pytest.raises(WorkspaceLimitError):
        model.check_workspace(x)


def test_param_validation_rejects_bad_values():
    p = model.RobotParams(mass=-1.0)
    with pytest.raises(ValueError, match="mass"):
        p.validate()
    p = model.RobotParams(inertia=np.diag([1.0, -1.0, 1.0]))
    with pytest.raises(ValueError, match="inertia"):
        p.validate()
    p = model.RobotParams(joint_axes=np.eye(3) * 2.0)
    with pytest.raises(ValueError, match="unit"):
        p.validate()
    limits = model.InputLimits(joint_rate=0.0)
    with pytest.raises(ValueError, match="joint_rate"):
        limits.validate()


def test_hybrid_bounds_layout():
    b = model.InputLimits().hybrid_bounds()
    assert b.shape == (15,)
    np.testing.assert_allclose(b[:3], [60.0, 60.0, 10.0])
    np.testing.assert_allclose(b[3:9], 60.0)
    np.testing.assert_allclose(b[9:], 3.0)
