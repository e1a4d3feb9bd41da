"""Signed-distance field checks against geometry worked out by hand."""

import numpy as np
import pytest

from ballbot_mpc.environment import SdfEnvironment, WallSurface


def wall_ahead(x=2.0, wall_id="front", extent=None):
    # Free space is x < 2, so the inward normal points along -x.
    return WallSurface(wall_id=wall_id, point=[x, 0.0, 0.0],
                       inward_normal=[-1.0, 0.0, 0.0], extent=extent)


def test_half_plane_distance():
    env = SdfEnvironment(walls=[wall_ahead()])
    env.validate()
    assert float(env.sdf([1.5, 0.0, 1.0])) == pytest.approx(0.5, abs=1e-8)
    assert float(env.sdf([2.3, -4.0, 0.2])) == pytest.approx(-0.3, abs=1e-8)
    np.testing.assert_allclose(np.asarray(env.sdf_gradient([1.5, 0, 1])),
                               [-1.0, 0.0, 0.0], atol=1e-8)


def test_contact_frame_is_orthonormal_and_oriented():
    env = SdfEnvironment(walls=[wall_ahead()])
    e_n, e_t, e_z = (np.asarray(v) for v in env.contact_frame([1.9, 0.5, 1.0]))
    np.testing.assert_allclose(e_n, [-1.0, 0.0, 0.0], atol=1e-8)
    np.testing.assert_allclose(e_t, [0.0, 1.0, 0.0], atol=1e-8)
    np.testing.assert_allclose(e_z, [0.0, 0.0, 1.0], atol=1e-12)
    frame = np.stack([e_n, e_t, e_z])
    np.testing.assert_allclose(frame @ frame.T, np.eye(3), atol=1e-8)


def test_two_walls_take_the_minimum():
    env = SdfEnvironment(walls=[
        wall_ahead(x=2.0, wall_id="front"),
        WallSurface("right", point=[0.0, -1.0, 0.0],
                    inward_normal=[0.0, 1.0, 0.0]),
    ])
    env.validate()
    # Closer to the right wall here.
    p = [1.0, -0.7, 1.0]
    assert float(env.sdf(p)) == pytest.approx(0.3, abs=1e-8)
    assert env.nearest_wall_id(p) == "right"
    np.testing.assert_allclose(np.asarray(env.sdf_gradient(p)),
                               [0.0, 1.0, 0.0], atol=1e-8)
    assert env.nearest_wall_id([1.9, 0.0, 1.0]) == "front"


def test_finite_extent_wall_edges():
    # Wall occupies y in [-1, 1] at x = 2 (tangent z_hat x (-x_hat) = -y_hat,
    # so the span [-1, 1] along the tangent covers y in [-1, 1]).
    env = SdfEnvironment(walls=[wall_ahead(extent=(-1.0, 1.0))])
    env.validate()
    assert float(env.sdf([1.5, 0.0, 1.0])) == pytest.approx(0.5, abs=1e-8)
    # Beyond the edge the nearest feature is the wall end point.
    d = float(env.sdf([1.6, 1.3, 1.0]))
    assert d == pytest.approx(np.hypot(0.4, 0.3), abs=1e-8)
    # Behind the plane but past the span: still outside the wall material.
    d = float(env.sdf([2.2, 1.5, 1.0]))
    assert d == pytest.approx(0.5, abs=1e-8)


def test_gradient_matches_finite_differences():
    env = SdfEnvironment(walls=[
        wall_ahead(x=1.5, wall_id="front", extent=(-2.0, 0.5)),
        WallSurface("right", point=[0.0, -1.2, 0.0],
                    inward_normal=[0.0, 1.0, 0.0]),
    ])
    rng = np.random.RandomState(5)
    eps = 1e-6
    for _ in range(20):
        p = rng.uniform([-1, -1, 0.2], [1.3, 1.0, 1.5])
        g = np.asarray(env.sdf_gradient(p))
        fd = np.zeros(3)
        for i in range(3):
            dp = np.zeros(3)
            dp[i] = eps
            fd[i] = (float(env.sdf(p + dp)) - float(env.sdf(p - dp))) / (2 * eps)
        np.testing.assert_allclose(g, fd, atol=1e-6)


def test_smoothing_blends_near_the_corner():
    walls = [wall_ahead(x=1.0, wall_id="front"),
             WallSurface("right", point=[0.0, -1.0, 0.0],
                         inward_normal=[0.0, 1.0, 0.0])]
    hard = SdfEnvironment(walls=walls)
    soft = SdfEnvironment(walls=walls, smoothing_radius=0.05)
    p = [0.9, -0.9, 1.0]  # equidistant from both walls
    assert float(soft.sdf(p)) < float(hard.sdf(p))
    # Where one wall dominates the smooth field matches the hard minimum.
    q = [0.9, 0.5, 1.0]
    assert float(soft.sdf(q)) == pytest.approx(float(hard.sdf(q)), abs=1e-6)


def test_empty_environment_is_far_from_everything():
    env = SdfEnvironment(walls=[])
    env.validate()
    assert float(env.sdf([0.0, 0.0, 1.0])) > 1e6
    with pytest.raises(ValueError):
        env.nearest_wall_id([0.0, 0.0, 1.0])


def test_validation_rejects_bad_walls():
    with pytest.raises(ValueError, match="unit"):
        SdfEnvironment(walls=[WallSurface("w", [0, 0, 0], [2, 0, 0])]).validate()
    with pytest.raises(ValueError, match="horizontal"):
        SdfEnvironment(
            walls=[WallSurface("w", [0, 0, 0], [0, 0, 1.0])]).validate()
    with pytest.raises(ValueError, match="unique"):
        SdfEnvironment(walls=[wall_ahead(), wall_ahead()]).validate()
    with pytest.raises(ValueError, match="extent"):
        SdfEnvironment(
            walls=[wall_ahead(extent=(1.0, -1.0))]).validate()
