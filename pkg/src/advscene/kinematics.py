"""Kinematic bicycle model with sideslip angle.

State rows are (x, y, speed, yaw); actions are (acceleration, steering).
The step is explicit Euler:

    beta  = atan(lr / (lf + lr) * tan(steer))
    x'    = x + u cos(yaw + beta) dt
    y'    = y + u sin(yaw + beta) dt
    u'    = max(0, u + accel dt)
    yaw'  = wrap(yaw + u / lr * sin(beta) dt)
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import wrap_angle, wrap_scalar
from .scenario import Action, AgentState, Scenario

SPEED_FLOOR = 0.1  # m/s, used by the inverse model when the agent is (nearly) stopped


@dataclass(frozen=True)
class BicycleParams:
    lf: float
    lr: float
    dt: float
    accel_min: float = -6.0
    accel_max: float = 4.0
    steer_max: float = 0.45

    def __post_init__(self):
        if not self.lr > 0 or not self.lf > 0:
            raise ValueError("wheelbase lengths must be positive")
        if not 0 < self.steer_max < math.pi / 2:
            raise ValueError("steer_max must lie in (0, pi/2)")
        if not self.accel_min <= self.accel_max:
            raise ValueError("accel_min must not exceed accel_max")
        if not self.dt > 0:
            raise ValueError("dt must be positive")


@dataclass(frozen=True)
class ActionBounds:
    accel_min: float = -6.0
    accel_max: float = 4.0
    steer_max: float = 0.45

    def clip(self, actions):
        a = np.array(actions, dtype=float, copy=True)
        a[..., 0] = np.clip(a[..., 0], self.accel_min, self.accel_max)
        a[..., 1] = np.clip(a[..., 1], -self.steer_max, self.steer_max)
        return a

    def params(self, lf: float, lr: float, dt: float) -> BicycleParams:
        return BicycleParams(lf, lr, dt, self.accel_min, self.accel_max, self.steer_max)


def step_batch(q, a, lf, lr, dt, with_jac=False):
    """Vectorized bicycle step over a leading agent axis.

    ``q`` is (n, 4), ``a`` is (n, 2); ``lf``/``lr`` broadcast against n.
    With ``with_jac`` also returns d(next)/d(state) (n, 4, 4) and
    d(next)/d(action) (n, 4, 2).  The speed clamp passes zero gradient when
    it is active (u + accel dt <= 0).
    """
    q = np.asarray(q, float)
    a = np.asarray(a, float)
    lf = np.asarray(lf, float)
    lr = np.asarray(lr, float)
    x, y, u, psi = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    acc, steer = a[..., 0], a[..., 1]
    ratio = lr / (lf + lr)
    tan_d = np.tan(steer)
    beta = np.arctan(ratio * tan_d)
    heading = psi + beta
    ch, sh = np.cos(heading), np.sin(heading)
    sb, cb = np.sin(beta), np.cos(beta)
    u_raw = u + acc * dt
    live = u_raw > 0.0

    nxt = np.empty(np.broadcast(x, acc).shape + (4,))
    nxt[..., 0] = x + u * ch * dt
    nxt[..., 1] = y + u * sh * dt
    nxt[..., 2] = np.where(live, u_raw, 0.0)
    nxt[..., 3] = wrap_angle(psi + u / lr * sb * dt)
    if not with_jac:
        return nxt

    dbeta = ratio * (1.0 + tan_d * tan_d) / (1.0 + (ratio * tan_d) ** 2)
    shape = nxt.shape[:-1]
    jx = np.zeros(shape + (4, 4))
    ja = np.zeros(shape + (4, 2))
    jx[..., 0, 0] = 1.0
    jx[..., 0, 2] = ch * dt
    jx[..., 0, 3] = -u * sh * dt
    jx[..., 1, 1] = 1.0
    jx[..., 1, 2] = sh * dt
    jx[..., 1, 3] = u * ch * dt
    jx[..., 2, 2] = np.where(live, 1.0, 0.0)
    jx[..., 3, 2] = sb / lr * dt
    jx[..., 3, 3] = 1.0
    ja[..., 0, 1] = -u * sh * dt * dbeta
    ja[..., 1, 1] = u * ch * dt * dbeta
    ja[..., 2, 0] = np.where(live, dt, 0.0)
    ja[..., 3, 1] = u / lr * cb * dt * dbeta
    return nxt, jx, ja, live


def bicycle_step(q: AgentState, a: Action, p: BicycleParams) -> AgentState:
    nxt = step_batch(q.as_array()[None], [[a.acceleration, a.steering]], p.lf, p.lr, p.dt)[0]
    return AgentState.from_array(nxt)


def rollout_array(q0, actions, lf, lr, dt) -> np.ndarray:
    """Roll out (T-1, 2) actions from a (4,) state; returns (T, 4)."""
    actions = np.asarray(actions, float).reshape(-1, 2)
    out = np.empty((len(actions) + 1, 4))
    out[0] = q0
    for k in range(len(actions)):
        out[k + 1] = step_batch(out[k], actions[k], lf, lr, dt)
    return out


def rollout(q0, actions, p: BicycleParams) -> np.ndarray:
    """Action-conditioned trajectory of length len(actions) + 1.

    ``q0`` may be an AgentState or a (4,) array; ``actions`` a list of
    Action or an (m, 2) array.
    """
    if isinstance(q0, AgentState):
        q0 = q0.as_array()
    if len(actions) and isinstance(actions[0], Action):
        actions = [(a.acceleration, a.steering) for a in actions]
    return rollout_array(q0, np.asarray(actions, float).reshape(-1, 2), p.lf, p.lr, p.dt)


def estimate_actions(traj, p: BicycleParams, speed_floor: float = SPEED_FLOOR) -> np.ndarray:
    """Invert the bicycle model on a logged (T, 4) trajectory by first differences.

    Returns (T-1, 2) actions clamped to the bounds in ``p``.
    """
    traj = np.asarray(traj, float)
    if traj.shape[0] < 2:
        raise ValueError("need at least two states to estimate actions")
    u = traj[:, 2]
    accel = (u[1:] - u[:-1]) / p.dt
    dpsi = wrap_angle(np.diff(traj[:, 3]))
    arg = dpsi * p.lr / (np.maximum(u[:-1], speed_floor) * p.dt)
    beta = np.arcsin(np.clip(arg, -1.0, 1.0))
    steer = np.arctan(np.tan(beta) * (p.lf + p.lr) / p.lr)
    out = np.stack([np.clip(accel, p.accel_min, p.accel_max),
                    np.clip(steer, -p.steer_max, p.steer_max)], axis=-1)
    return out


def scenario_params(s: Scenario, i: int, bounds: ActionBounds = ActionBounds()) -> BicycleParams:
    meta = s.agents[i]
    return bounds.params(meta.lf, meta.lr, s.dt)


def with_estimated_actions(s: Scenario, bounds: ActionBounds = ActionBounds(), force=False) -> Scenario:
    """Fill the scenario's ``actions`` from its background trajectories."""
    if s.actions is not None and not force:
        return s
    acts = np.zeros((s.n_background, s.horizon - 1, 2))
    for i in range(1, len(s.agents)):
        acts[i - 1] = estimate_actions(s.trajectories[i], scenario_params(s, i, bounds))
    return s.replace(actions=acts)


__all__ = [
    "ActionBounds", "BicycleParams", "bicycle_step", "estimate_actions", "rollout", "rollout_array",
    "step_batch", "with_estimated_actions", "wrap_scalar",
]
