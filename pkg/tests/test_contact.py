"""Contact curve, hard-mode residuals, and schedule extraction checks."""

import numpy as np
import pytest

from ballbot_mpc import contact, model
from ballbot_mpc.environment import SdfEnvironment, WallSurface


@pytest.fixture(scope="module")
def robot():
    return model.RobotParams()


@pytest.fixture(scope="module")
def soft():
    p = contact.SoftContactParams()
    p.validate()
    return p


@pytest.fixture(scope="module")
def env():
    # Wall half a metre ahead of the origin, free space behind it.
    return SdfEnvironment(walls=[
        WallSurface("front", point=[0.5, 0.0, 0.0],
                    inward_normal=[-1.0, 0.0, 0.0])])


def test_soft_force_curve_values(soft):
    # Half the saturation force exactly at d = -offset.
    f = float(contact.soft_normal_force(-soft.offset, soft))
    assert f == pytest.approx(0.5 * soft.f_max, abs=1e-12)
    # On the surface: 20 * (1 - tanh(stiffness * offset)).
    f0 = float(contact.soft_normal_force(0.0, soft))
    assert f0 == pytest.approx(20.0 * (1.0 - np.tanh(2.0)), abs=1e-12)
    # Saturation and decay.
    assert float(contact.soft_normal_force(-0.5, soft)) == \
        pytest.approx(soft.f_max, abs=1e-9)
    assert float(contact.soft_normal_force(0.1, soft)) < 1e-6
    # Strictly decreasing across the force shell (it saturates flat to
    # within float64 further out).
    d = np.linspace(-0.05, 0.03, 200)
    f = np.array([float(contact.soft_normal_force(x, soft)) for x in d])
    assert np.all(np.diff(f) < 0.0)


def test_soft_contact_force_direction(robot, soft, env):
    # Stretch the right arm forward into the wall's force shell (negative
    # shoulder pitch reaches forward).
    q_b = np.array([0.01, 0.0, 0.0, 0.0, 0.0])
    q_j = np.zeros(6)
    q_j[0] = -np.pi / 2  # hand 0.5 m ahead of the base
    p = np.asarray(model.forward_kinematics(q_b, q_j, 1, robot))
    d = float(env.sdf(p))
    assert d == pytest.approx(-0.01, abs=1e-8)  # just touching
    f = np.asarray(contact.soft_contact_force(
        q_b, q_j, 1, np.zeros(2), env, soft, robot))
    lam = float(contact.soft_normal_force(d, soft))
    np.testing.assert_allclose(f, [-lam, 0.0, 0.0], atol=1e-9)
    # Friction ratios add scaled tangent and vertical shear.
    f = np.asarray(contact.soft_contact_force(
        q_b, q_j, 1, np.array([0.3, -0.2]), env, soft, robot))
    np.testing.assert_allclose(f, [-lam, 0.3 * lam, -0.2 * lam], atol=1e-9)


def test_complementarity_residual(robot, soft, env):
    q_b = np.array([0.01, 0.0, 0.0, 0.0, 0.0])
    q_j = np.zeros(6)
    q_j[0] = -np.pi / 2
    x = np.concatenate([np.zeros(5), q_b, q_j])
    # At rest the product vanishes regardless of force.
    r = float(contact.complementarity_residual(
        x, np.zeros(6), 1, env, soft, robot))
    assert r == pytest.approx(0.0, abs=1e-12)
    # Moving end effector with nonzero force: residual is their product.
    v_j = np.array([0.5, 0, 0, 0, 0, 0])
    pdot = np.asarray(model.ee_velocity(x, v_j, 1, robot))
    p = np.asarray(model.forward_kinematics(q_b, q_j, 1, robot))
    lam = float(contact.soft_normal_force(float(env.sdf(p)), soft))
    r = float(contact.complementarity_residual(x, v_j, 1, env, soft, robot))
    assert r == pytest.approx(lam * np.linalg.norm(pdot), rel=1e-9)


def test_hybrid_constraints_in_contact(robot, env):
    # Place the hand exactly on the wall and press straight into it.
    q_b = np.array([0.0, 0.0, 0.0, 0.0, 0.0])
    q_j = np.zeros(6)
    q_j[0] = -np.pi / 2
    p = np.asarray(model.forward_kinematics(q_b, q_j, 1, robot))
    q_b[0] = 0.5 - p[0]  # shift the base so the hand touches x = 0.5
    x = np.concatenate([np.zeros(5), q_b, q_j])
    u = np.zeros(15)
    u[model.U_FC1] = [-10.0, 0.0, 0.0]  # 10 N into the wall (normal is -x)
    eq, ineq = contact.hybrid_contact_constraints(
        x, u, 1, True, env, robot, friction=0.5, lambda_min=1.0)
    np.testing.assert_allclose(np.asarray(eq), np.zeros(4), atol=1e-9)
    expected = [10.0 - 1.0, 5.0, 5.0, 5.0, 5.0]
    np.testing.assert_allclose(np.asarray(ineq), expected, atol=1e-9)
    # Excessive shear violates one side of the friction cone.
    u[model.U_FC1] = [-10.0, 7.0, 0.0]
    _, ineq = contact.hybrid_contact_constraints(
        x, u, 1, True, env, robot, friction=0.5, lambda_min=1.0)
    assert float(np.min(np.asarray(ineq))) == pytest.approx(-2.0, abs=1e-9)
    # Sliding while in contact shows up in the velocity equality.
    u[model.U_FC1] = [-10.0, 0.0, 0.0]
    u[model.U_RATES][:] = 0.0
    u[9] = 1.0  # right shoulder pitch rate
    eq, _ = contact.hybrid_contact_constraints(
        x, u, 1, True, env, robot, friction=0.5, lambda_min=1.0)
    assert np.linalg.norm(np.asarray(eq)[:3]) > 0.1


def test_hybrid_constraints_out_of_contact(robot, env):
    x = model.upright_state(p_xy=(-0.5, 0.0), params=robot)
    u = np.zeros(15)
    eq, ineq = contact.hybrid_contact_constraints(
        x, u, 1, False, env, robot, friction=0.5, lambda_min=1.0)
    np.testing.assert_allclose(np.asarray(eq), np.zeros(3), atol=1e-12)
    assert float(np.asarray(ineq)[0]) > 0.5  # comfortably in free space
    u[model.U_FC1] = [1.0, 2.0, 3.0]
    eq, _ = contact.hybrid_contact_constraints(
        x, u, 1, False, env, robot, friction=0.5, lambda_min=1.0)
    np.testing.assert_allclose(np.asarray(eq), [1.0, 2.0, 3.0], atol=1e-12)


def test_extract_schedule_groups_and_filters():
    times = np.arange(31) / 15.0  # two seconds at the draft rate
    forces = np.ones((2, 31))
    forces[0, 5:26] = 10.0   # right arm: 0.3333 s .. 1.6667 s
    forces[1, 10:13] = 10.0  # left arm: only 0.2 s, must be dropped
    sched = contact.extract_schedule(forces, times)
    assert len(sched.intervals) == 1
    iv = sched.intervals[0]
    assert iv.arm_index == 1
    assert iv.t_start == pytest.approx(5 / 15)
    assert iv.t_end == pytest.approx(25 / 15)
    assert iv.peak_force == pytest.approx(10.0)
    assert sched.horizon == (0.0, 2.0)


def test_extract_schedule_keeps_ongoing_contact_at_window_start():
    # A short run anchored at the first node is a press that began before
    # the window, not a spurious blip; the duration filter must spare it.
    times = np.linspace(0.0, 1.0, 11)
    forces = np.zeros((2, 11))
    forces[0, 0:3] = 9.0   # 0.2 s remaining, started in the past
    forces[1, 4:7] = 9.0   # 0.2 s mid-window blip, dropped
    sched = contact.extract_schedule(forces, times)
    assert len(sched.intervals) == 1
    iv = sched.intervals[0]
    assert iv.arm_index == 1
    assert iv.t_start == pytest.approx(0.0)
    assert iv.t_end == pytest.approx(0.2)


def test_extract_schedule_threshold_is_strict():
    times = np.linspace(0.0, 1.0, 11)
    forces = np.full((2, 11), 5.0)  # exactly at the threshold: no contact
    sched = contact.extract_schedule(forces, times)
    assert sched.intervals == []


def test_extract_schedule_open_interval_at_horizon_end():
    times = np.linspace(0.0, 1.0, 16)
    forces = np.zeros((2, 16))
    forces[0, 6:] = 8.0  # active through the final node
    sched = contact.extract_schedule(forces, times)
    assert len(sched.intervals) == 1
    assert sched.intervals[0].t_end == pytest.approx(1.0)


def test_extract_schedule_tags_nearest_wall(env):
    times = np.linspace(0.0, 1.0, 16)
    forces = np.zeros((2, 16))
    forces[1, 2:14] = 12.0
    pos = np.zeros((2, 16, 3))
    pos[1, :, 0] = 0.49  # hovering at the front wall
    sched = contact.extract_schedule(forces, times, ee_positions=pos, env=env)
    assert sched.intervals[0].wall_id == "front"
    assert sched.intervals[0].arm_index == 2


def test_schedule_queries():
    sched = contact.ContactSchedule(intervals=[
        contact.ContactInterval(1, 0.4, 1.2, "front", 11.0),
        contact.ContactInterval(2, 0.9, 1.4, "front", 8.0),
    ], horizon=(0.0, 2.0))
    assert sched.active(1, 0.4) and sched.active(1, 1.2)
    assert not sched.active(1, 1.3)
    np.testing.assert_array_equal(
        sched.flags(2, [0.0, 1.0, 1.39, 1.5]), [False, True, True, False])
    clipped = sched.clipped(1.0, 2.0)
    assert len(clipped.intervals) == 2
    assert clipped.intervals[0].t_start == pytest.approx(1.0)
    assert clipped.horizon == (1.0, 2.0)
    assert sched.approx_equal(sched, 1e-9)
    other = sched.clipped(0.0, 1.3)
    assert not sched.approx_equal(other, 1e-3)
    assert sched.approx_equal(other, 0.2)


def test_soft_param_validation():
    with pytest.raises(ValueError, match="f_max"):
        contact.SoftContactParams(f_max=0.0).validate()
    with pytest.raises(ValueError, match="friction"):
        contact.SoftContactParams(friction=0.0).validate()
