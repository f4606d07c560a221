import math

import numpy as np
import pytest
from scipy.integrate import solve_ivp

from advscene.kinematics import (ActionBounds, BicycleParams, bicycle_step, estimate_actions, rollout,
                                 rollout_array, step_batch)
from advscene.scenario import Action, AgentState


def test_straight_coast():
    q = bicycle_step(AgentState((0, 0), 10, 0), Action(0, 0), BicycleParams(1.4, 1.4, 0.1))
    assert q.as_array() == pytest.approx([1.0, 0.0, 10.0, 0.0], abs=1e-12)


def test_pure_acceleration():
    q = bicycle_step(AgentState((0, 0), 10, 0), Action(2, 0), BicycleParams(1.4, 1.4, 0.1))
    assert q.as_array() == pytest.approx([1.0, 0.0, 10.2, 0.0], abs=1e-12)


def _ode(t, z, lf, lr, steer):
    x, y, u, psi = z
    beta = math.atan(lr / (lf + lr) * math.tan(steer))
    return [u * math.cos(psi + beta), u * math.sin(psi + beta), 0.0, u / lr * math.sin(beta)]


def test_single_step_matches_fine_integration():
    p = BicycleParams(1.5, 1.5, 0.01)
    q = bicycle_step(AgentState((0, 0), 10, 0), Action(0, 0.2), p).as_array()
    # explicit Euler with 10 sub-steps of the same ODE
    z = np.array([0.0, 0.0, 10.0, 0.0])
    for _ in range(10):
        z = z + 0.001 * np.array(_ode(0, z, 1.5, 1.5, 0.2))
    assert np.abs(q - z).max() < 1e-3
    ref = solve_ivp(_ode, (0, 0.01), [0, 0, 10, 0], args=(1.5, 1.5, 0.2), rtol=1e-10, atol=1e-12).y[:, -1]
    assert np.abs(q - ref).max() < 1e-3


def test_speed_never_negative():
    q = step_batch(np.array([[0, 0, 0.3, 0]]), np.array([[-6, 0]]), 1.4, 1.4, 0.1)
    assert q[0, 2] == 0.0


def test_zero_actions_straight_line():
    traj = rollout(AgentState((0, 0), 5, 0), [Action(0, 0)] * 10, BicycleParams(1.4, 1.4, 0.1))
    assert traj.shape == (11, 4)
    assert traj[-1, 0] == pytest.approx(5.0)
    assert np.allclose(traj[:, 1], 0.0)


def test_constant_steer_traces_circle():
    lf, lr, steer = 1.2, 1.6, 0.3
    traj = rollout_array([0, 0, 4.0, 0], np.tile([0.0, steer], (2000, 1)), lf, lr, 0.001)
    xy = traj[:, :2]
    # algebraic least-squares circle fit
    A = np.column_stack([2 * xy[:, 0], 2 * xy[:, 1], np.ones(len(xy))])
    b = (xy ** 2).sum(1)
    cx, cy, c = np.linalg.lstsq(A, b, rcond=None)[0]
    r_fit = math.sqrt(c + cx * cx + cy * cy)
    beta = math.atan(lr / (lf + lr) * math.tan(steer))
    assert r_fit == pytest.approx(lr / math.sin(beta), rel=0.01)


def test_estimate_actions_round_trip(rng):
    p = BicycleParams(1.3, 1.5, 0.1)
    acts = np.column_stack([rng.uniform(-2, 2, 30), rng.uniform(-0.4, 0.4, 30)])
    traj = rollout_array([0, 0, 8.0, 0.2], acts, p.lf, p.lr, p.dt)
    assert traj[:, 2].min() >= 1.0
    est = estimate_actions(traj, p)
    assert np.abs(est - acts).max() < 1e-9
    assert np.abs(rollout_array(traj[0], est, p.lf, p.lr, p.dt)[:, :2] - traj[:, :2]).max() < 1e-6


def test_stopped_agent_gives_zero_actions():
    traj = np.tile([3.0, 4.0, 0.0, 1.0], (10, 1))
    assert np.array_equal(estimate_actions(traj, BicycleParams(1.4, 1.4, 0.1)), np.zeros((9, 2)))


def test_noisy_positions_re_rollout_close(rng):
    p = BicycleParams(1.4, 1.4, 0.1)
    acts = np.column_stack([rng.uniform(-1, 1, 49), rng.uniform(-0.1, 0.1, 49)])
    clean = rollout_array([0, 0, 10.0, 0], acts, p.lf, p.lr, p.dt)
    noisy_xy = clean[:, :2] + rng.normal(0, 0.05, clean[:, :2].shape)
    # position channels perturbed; logged speed and yaw channels kept
    noisy = np.column_stack([noisy_xy, clean[:, 2:]])
    est = estimate_actions(noisy, p)
    re = rollout_array(noisy[0], est, p.lf, p.lr, p.dt)
    rms = math.sqrt(((re[:, :2] - noisy_xy) ** 2).sum(1).mean())
    assert rms < 0.5


def test_step_jacobian_matches_finite_differences(rng):
    for _ in range(20):
        q = np.array([rng.normal(), rng.normal(), rng.uniform(1, 10), rng.uniform(-3, 3)])
        a = np.array([rng.uniform(-3, 3), rng.uniform(-0.4, 0.4)])
        _, jx, ja, _ = step_batch(q[None], a[None], 1.3, 1.5, 0.1, with_jac=True)
        h = 1e-6
        for j in range(4):
            e = np.zeros(4); e[j] = h
            fd = (step_batch(q + e, a, 1.3, 1.5, 0.1) - step_batch(q - e, a, 1.3, 1.5, 0.1)) / (2 * h)
            assert np.allclose(jx[0, :, j], fd, atol=1e-6)
        for j in range(2):
            e = np.zeros(2); e[j] = h
            fd = (step_batch(q, a + e, 1.3, 1.5, 0.1) - step_batch(q, a - e, 1.3, 1.5, 0.1)) / (2 * h)
            assert np.allclose(ja[0, :, j], fd, atol=1e-6)


def test_rollout_prefix_property(rng):
    acts = rng.uniform(-0.3, 0.3, (20, 2))
    full = rollout_array([0, 0, 5, 0], acts, 1.4, 1.4, 0.1)
    part = rollout_array([0, 0, 5, 0], acts[:7], 1.4, 1.4, 0.1)
    assert np.array_equal(full[:8], part)


def test_rollout_rigid_equivariance(rng):
    acts = rng.uniform(-0.3, 0.3, (20, 2))
    base = rollout_array([0, 0, 5, 0], acts, 1.4, 1.4, 0.1)
    th, tx, ty = 0.8, 3.0, -2.0
    moved = rollout_array([tx, ty, 5, th], acts, 1.4, 1.4, 0.1)
    c, s = math.cos(th), math.sin(th)
    xy = base[:, :2] @ np.array([[c, s], [-s, c]]) + [tx, ty]
    assert np.allclose(moved[:, :2], xy, atol=1e-9)


def test_bounds_clip():
    out = ActionBounds().clip([[10, 1], [-10, -1], [0, 0]])
    assert out.tolist() == [[4, 0.45], [-6, -0.45], [0, 0]]


def test_invalid_params():
    with pytest.raises(ValueError):
        BicycleParams(1.4, 0.0, 0.1)
    with pytest.raises(ValueError):
        BicycleParams(1.4, 1.4, 0.0)
