"""Differentiable closed-loop rollout and its reverse-mode gradient.

``simulate`` rolls every background agent forward with the bicycle model
from its logged initial state and lets the ego policy react step by step.
It records the per-step Jacobians of the bicycle model and of the ego
policy on a tape.  ``backward`` runs the adjoint recursion over that tape:

    lam[T-1] = dC/dq[T-1]
    lam[k]   = dC/dq[k] + J_x[k]^T lam[k+1] (+ ego-policy terms)
    dC/da[k] = J_a[k]^T lam[k+1]

In ``detach`` mode the ego trajectory is treated as a constant, i.e. no
adjoint flows through the ego's reactions.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .costs import CostBreakdown, CostWeights, DrivableMap, total_cost
from .ego import N_CTRL, N_Z_EGO, EgoPolicy, Scene
from .kinematics import step_batch
from .scenario import Scenario

ATTACH, DETACH = "attach", "detach"


@dataclass
class CostValue:
    value: float
    grad: Optional[np.ndarray] = None  # (N, T, 4)
    branches: tuple = ()
    breakdown: Optional[CostBreakdown] = None


class TotalCost:
    """Callable wrapper of ``costs.total_cost`` for a fixed candidate set."""

    def __init__(self, scenario: Scenario, candidates: Sequence[int], weights: CostWeights = CostWeights(),
                 drivable: Optional[DrivableMap] = None):
        self.dims = (scenario.lengths, scenario.widths)
        self.candidates = sorted(candidates)
        self.weights = weights
        self.drivable = drivable

    def __call__(self, traj, with_grad=False) -> CostValue:
        b = total_cost(traj, self.dims, self.candidates, self.weights, self.drivable, with_grad=with_grad)
        return CostValue(b.total, b.grad, b.branches, b)


class FunctionCost:
    """Adapter for a plain ``fn(traj) -> (value, grad)`` cost."""

    def __init__(self, fn: Callable):
        self.fn = fn

    def __call__(self, traj, with_grad=False) -> CostValue:
        v, g = self.fn(traj)
        return CostValue(float(v), np.asarray(g, float) if with_grad else None)


@dataclass
class RolloutTape:
    trajectories: np.ndarray  # (N, T, 4)
    ego_actions: np.ndarray  # (T-1, 2)
    mode: str
    reactive: bool
    jx: Optional[np.ndarray] = None  # (T-1, N, 4, 4)
    ja: Optional[np.ndarray] = None  # (T-1, N, 4, 2)
    policy_jac: Optional[np.ndarray] = None  # (T-1, 6, D)
    branches: list = field(default_factory=list)
    inputs: tuple = field(default=(), repr=False)
    cost: Optional[CostValue] = field(default=None, repr=False)  # set by backward

    @property
    def horizon(self) -> int:
        return self.trajectories.shape[1]

    def replay(self) -> "RolloutTape":
        return simulate(*self.inputs)[1]


def _cruise_speed(scenario: Scenario) -> float:
    u0 = float(scenario.trajectories[0, 0, 2])
    return u0 if u0 >= 1.0 else 5.0


def simulate(scenario: Scenario, ego_policy: EgoPolicy, actions, mode: str = ATTACH,
             drivable: Optional[DrivableMap] = None, record: bool = True):
    """Closed-loop rollout of all agents.

    Returns ``(trajectories, tape)``; trajectories is (N, T, 4) with the ego
    in row 0.  With ``record=False`` no Jacobians are stored (forward only).
    """
    if mode not in (ATTACH, DETACH):
        raise ValueError(f"unknown gradient mode {mode!r}")
    actions = np.asarray(actions, float)
    N, T = len(scenario.agents), scenario.horizon
    n = N - 1
    if actions.shape != (n, T - 1, 2):
        raise ValueError(f"actions shape {actions.shape}, expected {(n, T - 1, 2)}")
    lf = np.array([a.lf for a in scenario.agents])
    lr = np.array([a.lr for a in scenario.agents])
    dt = scenario.dt
    lengths, widths = scenario.lengths, scenario.widths
    cruise = _cruise_speed(scenario)
    policy_grads = record and mode == ATTACH and ego_policy.reactive

    X = np.empty((N, T, 4))
    X[:, 0] = scenario.trajectories[:, 0]
    ego_actions = np.empty((T - 1, 2))
    jx = np.empty((T - 1, N, 4, 4)) if record else None
    ja = np.empty((T - 1, N, 4, 2)) if record else None
    pjac = np.empty((T - 1, 2 + N_CTRL, N_Z_EGO + 4 * n)) if policy_grads else None
    branches = []
    ctrl = ego_policy.initial_state()
    step_actions = np.empty((N, 2))
    for k in range(T - 1):
        scene = Scene(k, X[0, k], X[1:, k], lengths, widths, scenario.target_point, dt, cruise, drivable)
        a0, ctrl, pj, br = ego_policy.act(scene, ctrl, need_jac=policy_grads)
        ego_actions[k] = a0
        step_actions[0] = a0
        step_actions[1:] = actions[:, k]
        if record:
            X[:, k + 1], jx[k], ja[k], live = step_batch(X[:, k], step_actions, lf, lr, dt, with_jac=True)
            branches.append((br, live.tobytes()))
            if policy_grads:
                pjac[k] = pj
        else:
            X[:, k + 1] = step_batch(X[:, k], step_actions, lf, lr, dt)
            branches.append((br, (X[:, k, 2] + step_actions[:, 0] * dt > 0).tobytes()))
    tape = RolloutTape(X, ego_actions, mode, ego_policy.reactive, jx, ja, pjac, branches,
                       (scenario, ego_policy, actions.copy(), mode, drivable, record))
    return X, tape


def backward(tape: RolloutTape, cost_fn) -> tuple:
    """Exact gradient of ``cost_fn`` of the rollout w.r.t. every background action.

    Returns ``(cost, grad)`` with grad shaped (n, T-1, 2).
    """
    if tape.jx is None:
        raise ValueError("tape was recorded without Jacobians")
    cv = cost_fn(tape.trajectories, with_grad=True)
    tape.cost = cv
    G = cv.grad
    N, T = tape.trajectories.shape[:2]
    n = N - 1
    through_ego = tape.mode == ATTACH and tape.reactive
    grad = np.zeros((n, T - 1, 2))
    lam = G[:, T - 1].copy()
    mu = np.zeros(N_CTRL)
    for k in range(T - 2, -1, -1):
        jx, ja = tape.jx[k], tape.ja[k]
        grad[:, k] = np.einsum("nij,ni->nj", ja[1:], lam[1:])
        new = np.einsum("nij,ni->nj", jx, lam) + G[:, k]
        if through_ego:
            lam_a0 = ja[0].T @ lam[0]
            P = tape.policy_jac[k]
            v = P[:2].T @ lam_a0 + P[2:].T @ mu
            new[0] += v[:4]
            mu = v[4:N_Z_EGO]
            new[1:] += v[N_Z_EGO:].reshape(n, 4)
        lam = new
    return cv.value, grad


def value_and_grad(scenario, ego_policy, actions, cost_fn, mode=ATTACH, drivable=None):
    traj, tape = simulate(scenario, ego_policy, actions, mode, drivable)
    cost, grad = backward(tape, cost_fn)
    return cost, grad, traj, tape


def rollout_cost(scenario, ego_policy, actions, cost_fn, drivable=None) -> CostValue:
    traj, _ = simulate(scenario, ego_policy, actions, DETACH, drivable, record=False)
    return cost_fn(traj, with_grad=False)


def _evaluate(scenario, ego_policy, actions, cost_fn, drivable, want_signature):
    traj, tape = simulate(scenario, ego_policy, actions, DETACH, drivable, record=False)
    cv = cost_fn(traj, with_grad=want_signature)
    if not want_signature:
        return cv.value, None
    h = hashlib.sha256()
    h.update(repr(tape.branches).encode())
    _digest(h, cv.branches)
    return cv.value, h.digest()


def branch_signature(scenario, ego_policy, actions, cost_fn, drivable=None) -> bytes:
    """Digest of every discrete decision in the forward pass and the cost.

    Two inputs with equal signatures lie on the same smooth piece of the
    rollout-plus-cost map.
    """
    return _evaluate(scenario, ego_policy, actions, cost_fn, drivable, True)[1]


def _digest(h, obj):
    if isinstance(obj, np.ndarray):
        h.update(obj.tobytes())
    elif isinstance(obj, (tuple, list)):
        for o in obj:
            _digest(h, o)
    else:
        h.update(repr(obj).encode())


def finite_diff_grad(scenario, ego_policy, actions, cost_fn, h: float = 1e-5, drivable=None,
                     coords=None, return_stability: bool = False):
    """Central differences (C(a + h e) - C(a - h e)) / 2h per action coordinate.

    ``coords`` optionally restricts evaluation to a list of (i, k, c) index
    triples; other entries are returned as NaN.  With ``return_stability`` a
    boolean array marks coordinates whose whole stencil stays on one smooth
    piece (same branch signature at a - h e, a and a + h e).
    """
    if not h > 0:
        raise ValueError("step h must be positive")
    actions = np.asarray(actions, float)
    out = np.full(actions.shape, np.nan) if coords is not None else np.zeros(actions.shape)
    stable = np.ones(actions.shape, bool)
    if coords is None:
        coords = list(np.ndindex(actions.shape))
    base_sig = branch_signature(scenario, ego_policy, actions, cost_fn, drivable) if return_stability else None
    for idx in coords:
        idx = tuple(idx)
        vals, sigs = [], []
        for sign in (1.0, -1.0):
            a = actions.copy()
            a[idx] += sign * h
            v, sig = _evaluate(scenario, ego_policy, a, cost_fn, drivable, return_stability)
            vals.append(v)
            sigs.append(sig)
        out[idx] = (vals[0] - vals[1]) / (2.0 * h)
        if return_stability:
            stable[idx] = sigs[0] == base_sig == sigs[1]
    if return_stability:
        return out, stable
    return out
