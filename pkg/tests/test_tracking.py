"""Tracking-loop checks: feedforward blend, PID arithmetic, impedance map."""

import numpy as np
import pytest

from ballbot_mpc import model, solver
from ballbot_mpc.contact import ContactSchedule
from ballbot_mpc.mpc import PlanBundle, RefinedPlan
from ballbot_mpc.model import InputLimits, RobotParams, upright_state
from ballbot_mpc.tracking import (GainSet, TrackingCommand,
                                  TrackingController)

ROBOT = RobotParams()
PERIOD = 1e-3


def bundle_holding(x_ref, u_ff=None, t0=0.0):
    """A plan that holds one state with a constant input."""
    u = np.zeros(model.HYBRID_INPUT_DIM) if u_ff is None else np.asarray(
        u_ff, dtype=float)
    sol = solver.TrajectorySolution(
        times=np.array([t0, t0 + 2.0]),
        states=np.stack([x_ref, x_ref]),
        inputs=u[None, :], cost=0.0, cost_terms={}, iterations=1,
        converged=True)
    n = 1
    plan = RefinedPlan(solution=sol, flags=np.zeros((2, n)),
                       normal_forces=np.zeros((2, n)),
                       ee_speeds=np.zeros((2, n)),
                       distances=np.zeros((2, n + 1)),
                       schedule=ContactSchedule(), solve_time=t0)
    return PlanBundle(refined=plan, draft=None, schedule=plan.schedule)


def controller(gains=None, staleness=0.5):
    return TrackingController(gains or GainSet(), InputLimits(), ROBOT,
                              PERIOD, staleness_limit=staleness)


def test_gains_validation():
    with pytest.raises(ValueError):
        GainSet(yaw_pid=(20.0, -1.0, 0.0)).validate()
    with pytest.raises(ValueError):
        GainSet(kp_task=np.diag([1.0, 1.0, 0.0])).validate()
    bad = 500.0 * np.eye(3)
    bad[0, 1] = 3.0
    with pytest.raises(ValueError):
        GainSet(kp_task=bad).validate()
    GainSet().validate()


def test_on_plan_output_is_pure_feedforward():
    x = upright_state(params=ROBOT)
    u_ff = np.zeros(model.HYBRID_INPUT_DIM)
    u_ff[model.U_DRIVE] = [3.0, -1.0, 0.5]
    ctrl = controller()
    cmd = ctrl.command(0.0, x, np.zeros(6), bundle_holding(x, u_ff))
    assert isinstance(cmd, TrackingCommand)
    assert np.allclose(cmd.drive, [3.0, -1.0, 0.5])
    assert np.allclose(cmd.joint_torques, 0.0, atol=1e-9)
    assert not cmd.stale


def test_yaw_proportional_arithmetic():
    x_ref = upright_state(yaw=0.1, params=ROBOT)
    x_hat = upright_state(yaw=0.0, params=ROBOT)
    ctrl = controller(GainSet(yaw_pid=(20.0, 0.0, 0.0)))
    drive, stale = ctrl.body_control(0.0, x_hat, bundle_holding(x_ref))
    assert drive[2] == pytest.approx(2.0)
    assert not stale


def test_yaw_error_wraps():
    x_ref = upright_state(yaw=np.pi - 0.05, params=ROBOT)
    x_hat = upright_state(yaw=-np.pi + 0.05, params=ROBOT)
    ctrl = controller(GainSet(yaw_pid=(20.0, 0.0, 0.0)))
    drive, _ = ctrl.body_control(0.0, x_hat, bundle_holding(x_ref))
    # Short way round is -0.1 rad, not +2pi - 0.1.
    assert drive[2] == pytest.approx(-2.0)


def test_lean_cascade_proportional_path():
    # Pure proportional chain: lean error -> velocity target -> force.
    gains = GainSet(lean_pid=(8.0, 0.0, 0.0), velocity_pd=(60.0, 0.0),
                    yaw_pid=(0.0, 0.0, 0.0))
    x_ref = upright_state(params=ROBOT)
    x_hat = x_ref.copy()
    x_hat[8] = 0.01  # excess nose-down pitch
    ctrl = controller(gains)
    drive, _ = ctrl.body_control(0.0, x_hat, bundle_holding(x_ref))
    assert drive[0] == pytest.approx(60.0 * 8.0 * 0.01)
    assert drive[1] == pytest.approx(0.0, abs=1e-12)


def test_integrator_clamps_at_windup_fraction():
    gains = GainSet(lean_pid=(0.0, 10.0, 0.0), velocity_pd=(1.0, 0.0),
                    yaw_pid=(0.0, 0.0, 0.0))
    x_ref = upright_state(params=ROBOT)
    x_hat = x_ref.copy()
    x_hat[8] = 0.5  # large constant lean error, saturating drive
    ctrl = controller(gains)
    bundle = bundle_holding(x_ref)
    for k in range(5000):
        drive, _ = ctrl.body_control(k * PERIOD, x_hat, bundle)
    limits = InputLimits()
    # Integral contribution alone stays within 20% of the drive limit.
    assert 10.0 * np.max(np.abs(ctrl._lean_int)) \
        <= 0.2 * limits.drive_force + 1e-9


def test_outputs_saturate():
    x_ref = upright_state(params=ROBOT)
    x_hat = x_ref.copy()
    x_hat[8] = 0.3
    x_hat[7] = -2.0
    x_hat[0] = 40.0  # huge forward momentum
    ctrl = controller()
    cmd = ctrl.command(0.0, x_hat, np.full(6, 5.0), bundle_holding(x_ref))
    limits = InputLimits()
    assert np.all(np.abs(cmd.drive[:2]) <= limits.drive_force + 1e-12)
    assert abs(cmd.drive[2]) <= limits.drive_torque + 1e-12
    assert np.all(np.abs(cmd.joint_torques)
                  <= ctrl.gains.torque_limit + 1e-12)


def test_impedance_maps_position_error_through_jacobian():
    q_j = np.array([-0.4, 0.15, -0.7, 0.0, 0.0, 0.0])
    x_hat = upright_state(q_j=q_j, params=ROBOT)
    qj_ref = q_j + np.array([0.02, -0.01, 0.03, 0.0, 0.0, 0.0])
    x_ref = upright_state(q_j=qj_ref, params=ROBOT)
    ctrl = controller()
    tau, singular = ctrl.arm_control(0.0, x_hat, np.zeros(6),
                                     bundle_holding(x_ref))
    jac = np.asarray(model.ee_jacobian(x_hat[model.QB], q_j, 1, ROBOT))
    p = np.asarray(model.forward_kinematics_body(q_j, 1, ROBOT))
    p_ref = np.asarray(model.forward_kinematics_body(qj_ref, 1, ROBOT))
    expected = jac.T @ (ctrl.gains.kp_task @ (p_ref - p))
    assert np.allclose(tau[:3], expected[:3], atol=1e-8)
    assert np.allclose(tau[3:], 0.0)  # left arm stays on reference
    assert not singular


def test_impedance_opposes_velocity():
    rng = np.random.RandomState(7)
    ctrl = controller()
    for _ in range(20):
        q_j = rng.uniform(-0.8, 0.8, 6)
        x = upright_state(q_j=q_j, params=ROBOT)
        rates = rng.uniform(-2.0, 2.0, 6)
        tau, _ = ctrl.arm_control(0.0, x, rates, bundle_holding(x))
        assert float(rates @ tau) <= 1e-10


def test_press_feedforward_pushes_into_the_wall():
    # Planned reaction points back toward the robot (-x); the commanded
    # torque must press the hand forward (+x), i.e. do positive work on a
    # virtual +x hand displacement.
    q_j = np.array([-0.3, 0.0, -0.3, -0.3, 0.0, -0.3])
    x = upright_state(q_j=q_j, params=ROBOT)
    u_ff = np.zeros(model.HYBRID_INPUT_DIM)
    u_ff[model.U_FC1] = [-20.0, 0.0, 0.0]
    ctrl = controller()
    tau, _ = ctrl.arm_control(0.0, x, np.zeros(6), bundle_holding(x, u_ff))
    jac = np.asarray(model.ee_jacobian(x[model.QB], q_j, 1, ROBOT))
    hand_motion = jac @ tau[None, :].ravel()
    assert hand_motion[0] > 0.0


def test_press_dominates_impedance_during_scheduled_push():
    q_j = np.array([-0.3, 0.0, -0.3, 0.0, 0.0, 0.0])
    x_hat = upright_state(q_j=q_j, params=ROBOT)
    # A few millimetres of tracking error against a 20 N planned push.
    qj_ref = q_j + 0.002
    x_ref = upright_state(q_j=qj_ref, params=ROBOT)
    u_ff = np.zeros(model.HYBRID_INPUT_DIM)
    u_ff[model.U_FC1] = [-20.0, 0.0, 0.0]
    ctrl = controller()
    tau_both, _ = ctrl.arm_control(0.0, x_hat, np.zeros(6),
                                   bundle_holding(x_ref, u_ff))
    tau_imp, _ = ctrl.arm_control(0.0, x_hat, np.zeros(6),
                                  bundle_holding(x_ref))
    tau_press = tau_both - tau_imp
    assert np.linalg.norm(tau_press[:3]) > 3.0 * np.linalg.norm(tau_imp[:3])


def test_stale_plan_drops_feedforward():
    x = upright_state(params=ROBOT)
    u_ff = np.zeros(model.HYBRID_INPUT_DIM)
    u_ff[model.U_DRIVE] = [5.0, 0.0, 1.0]
    u_ff[model.U_FC1] = [-15.0, 0.0, 0.0]
    ctrl = controller(staleness=0.5)
    bundle = bundle_holding(x, u_ff, t0=0.0)
    cmd = ctrl.command(0.7, x, np.zeros(6), bundle)
    assert cmd.stale
    assert np.allclose(cmd.drive, 0.0, atol=1e-9)
    assert np.allclose(cmd.joint_torques, 0.0, atol=1e-9)


def test_draft_only_bundle_maps_smooth_input_layout():
    x = upright_state(params=ROBOT)
    u_ci = np.zeros(13)
    u_ci[0:3] = [2.0, 0.0, 0.3]
    sol = solver.TrajectorySolution(
        times=np.array([0.0, 2.0]), states=np.stack([x, x]),
        inputs=u_ci[None, :], cost=0.0, cost_terms={}, iterations=1,
        converged=True)
    from ballbot_mpc.mpc import DraftPlan
    draft = DraftPlan(solution=sol, normal_forces=np.zeros((2, 2)),
                      ee_positions=np.zeros((2, 2, 3)),
                      ee_speeds=np.zeros((2, 2)),
                      distances=np.zeros((2, 2)),
                      schedule=ContactSchedule(), solve_time=0.0)
    bundle = PlanBundle(refined=None, draft=draft,
                        schedule=draft.schedule)
    ctrl = controller()
    drive, stale = ctrl.body_control(0.0, x, bundle)
    assert np.allclose(drive, [2.0, 0.0, 0.3])
    assert not stale
