"""Adversarial scenario generation by gradient descent on background actions.

Two modes share one Adam loop:

* ``king``: every background agent is a candidate and all action entries
  are updated.
* ``regents``: static agents and agents that spend most of the logged
  horizon in the ego's rear sector are dropped from the candidate set, and
  candidates sitting in the front "red zone" on the current rollout get
  their steering updates cancelled for that iteration.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .costs import CostWeights, DrivableMap, build_drivable_map
from .ego import EgoPolicy, default_ego_policy
from .geometry import agent_box, impact_point, to_frame, wrap_angle
from .grad import ATTACH, DETACH, TotalCost, backward, simulate
from .kinematics import ActionBounds, with_estimated_actions
from .scenario import AgentState, Scenario, ScenarioError, first_collision, first_collision_in

KING, REGENTS = "king", "regents"


class GeneratorError(RuntimeError):
    """Base class of per-scenario generation failures."""


class NoCandidates(GeneratorError):
    """Candidate filtering left no adversary to optimize."""


class InputNotCollisionFree(GeneratorError):
    """The input scenario already contains an ego collision."""


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class GeneratorConfig:
    mode: str = REGENTS
    learning_rate: float = 1e-3
    max_iters: int = 500
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    tau_front: float = 0.5
    tau_rear: float = 0.5
    orange_half_angle: float = math.pi / 8
    front_yaw_window: float = math.pi / 8
    static_threshold: float = 1.0
    ego_grad: str = ATTACH
    weights: CostWeights = CostWeights()
    bounds: ActionBounds = ActionBounds()
    map_resolution: float = 0.25
    map_sigma: float = 1.0

    def __post_init__(self):
        if self.mode not in (KING, REGENTS):
            raise ConfigError(f"mode must be {KING!r} or {REGENTS!r}, got {self.mode!r}")
        if self.ego_grad not in (ATTACH, DETACH):
            raise ConfigError(f"ego_grad must be {ATTACH!r} or {DETACH!r}, got {self.ego_grad!r}")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if not (isinstance(self.max_iters, int) and self.max_iters >= 0):
            raise ConfigError("max_iters must be a non-negative integer")
        for name in ("tau_front", "tau_rear"):
            v = getattr(self, name)
            if not 0 < v <= 1:
                raise ConfigError(f"{name} must lie in (0, 1], got {v}")
        if not 0 <= self.beta1 < 1 or not 0 <= self.beta2 < 1 or not self.eps > 0:
            raise ConfigError("Adam parameters out of range")
        if not 0 < self.orange_half_angle <= math.pi or not 0 < self.front_yaw_window <= math.pi:
            raise ConfigError("zone angles must lie in (0, pi]")
        if not self.static_threshold >= 0:
            raise ConfigError("static_threshold must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        d = dict(d)
        if "weights" in d and isinstance(d["weights"], dict):
            d["weights"] = CostWeights(**d["weights"])
        if "bounds" in d and isinstance(d["bounds"], dict):
            d["bounds"] = ActionBounds(**d["bounds"])
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown generator options {unknown}")
        return cls(**d)


# ---------------------------------------------------------------------------
# zone predicates


def _xy_yaw(q):
    if isinstance(q, AgentState):
        return q.position[0], q.position[1], q.yaw
    q = np.asarray(q, float)
    return q[..., 0], q[..., 1], q[..., 3]


def _relative(ego, adv):
    ex, ey, epsi = _xy_yaw(ego)
    ax, ay, apsi = _xy_yaw(adv)
    dx, dy = np.subtract(ax, ex), np.subtract(ay, ey)
    coincident = (dx == 0) & (dy == 0)
    bearing = wrap_angle(np.arctan2(dy, dx) - epsi)
    dpsi = wrap_angle(np.subtract(apsi, epsi))
    return bearing, dpsi, coincident


def orange_zone(ego, adv, half_angle: float = math.pi / 8):
    """Vectorized rear-sector test on state arrays (..., 4)."""
    bearing, _, coincident = _relative(ego, adv)
    return (np.abs(wrap_angle(bearing - math.pi)) <= half_angle) & ~coincident


def red_zone(ego, adv, window: float = math.pi / 8):
    """Vectorized front red-zone test on state arrays (..., 4)."""
    da, dpsi, coincident = _relative(ego, adv)
    return ((np.abs(dpsi) < window) & (np.abs(da) < window) & (np.sign(da) == np.sign(dpsi))
            & (np.abs(da) > 0) & (np.abs(da) <= np.abs(dpsi)) & ~coincident)


def in_orange_zone(ego, adv, half_angle: float = math.pi / 8) -> bool:
    """True if ``adv`` sits in the rear sector of half-width ``half_angle``
    centred on the ego's backward axis.  Coincident positions are not."""
    return bool(orange_zone(ego, adv, half_angle))


def in_red_zone(ego, adv, window: float = math.pi / 8) -> bool:
    """True if ``adv`` is ahead of the ego, yawed to the same side as its
    position offset, and its bearing lies inside its yaw offset."""
    return bool(red_zone(ego, adv, window))


def is_static(traj, threshold: float = 1.0) -> bool:
    """Max displacement from the initial position stays below ``threshold``."""
    traj = np.asarray(traj, float)
    d = np.hypot(traj[:, 0] - traj[0, 0], traj[:, 1] - traj[0, 1])
    return bool(d.max() < threshold)


def orange_fraction(trajectories, i: int, half_angle: float) -> float:
    return float(orange_zone(trajectories[0], trajectories[i], half_angle).mean())


def red_fraction(trajectories, i: int, window: float) -> float:
    return float(red_zone(trajectories[0], trajectories[i], window).mean())


def candidate_adversaries(scenario: Scenario, config: GeneratorConfig = GeneratorConfig()) -> tuple:
    """Indices of background agents the optimizer may target."""
    n = scenario.n_background
    if n < 1:
        raise NoCandidates("scenario has no background agents")
    idx = range(1, n + 1)
    if config.mode == KING:
        return tuple(idx)
    traj = scenario.trajectories
    keep = tuple(i for i in idx
                 if not is_static(traj[i], config.static_threshold)
                 and orange_fraction(traj, i, config.orange_half_angle) < config.tau_rear)
    if not keep:
        raise NoCandidates("every background agent is static or mostly in the ego's rear sector")
    return keep


def steering_mask(trajectories, config: GeneratorConfig = GeneratorConfig(), candidates=None) -> np.ndarray:
    """Boolean (n,) flags: adversary i+1 spends at least ``tau_front`` of the
    rollout in the red zone, so its steering update is cancelled."""
    traj = np.asarray(trajectories, float)
    n = traj.shape[0] - 1
    flags = np.zeros(n, bool)
    if n == 0:
        return flags
    frac = red_zone(traj[0][None], traj[1:], config.front_yaw_window).mean(axis=1)
    flags = frac >= config.tau_front
    if candidates is not None:
        allowed = np.zeros(n, bool)
        allowed[np.asarray(candidates, int) - 1] = True
        flags &= allowed
    return flags


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class Adam:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: Optional[np.ndarray] = None
    v: Optional[np.ndarray] = None
    t: int = 0

    def step(self, params, grad, update=None):
        """Descent step on the entries where ``update`` is True.  Frozen
        entries keep both their value and their moment estimates."""
        if self.m is None:
            self.m = np.zeros_like(params)
            self.v = np.zeros_like(params)
        if update is None:
            update = np.ones(params.shape, bool)
        self.t += 1
        m = self.beta1 * self.m + (1 - self.beta1) * grad
        v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        self.m = np.where(update, m, self.m)
        self.v = np.where(update, v, self.v)
        m_hat = self.m / (1 - self.beta1 ** self.t)
        v_hat = self.v / (1 - self.beta2 ** self.t)
        step = self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return np.where(update, params - step, params)


@dataclass
class TraceRow:
    iteration: int
    ego_collision: float
    adv_collision: float
    deviation: float
    total: float
    chosen_adversary: int
    masked: tuple


TRACE_FIELDS = ("iteration", "ego_collision", "adv_collision", "deviation", "total",
                "chosen_adversary", "masked_set")


@dataclass
class GenerationResult:
    success: bool
    iterations_used: int
    collision: Optional[tuple]
    final_scenario: Scenario
    cost_trace: list
    candidates: tuple
    masked_per_iteration: list
    mode: str
    chosen_adversary: Optional[int] = None
    impact_point: Optional[tuple] = None  # ego frame, meters
    collided_at_start: bool = False
    config: dict = field(default_factory=dict, repr=False)

    @property
    def rear_impact(self) -> Optional[bool]:
        if self.impact_point is None:
            return None
        return self.impact_point[0] < 0.0

    def steering_tv(self, agent: Optional[int] = None) -> float:
        """Total variation of an adversary's steering series (default: the chosen one)."""
        i = self.chosen_adversary if agent is None else agent
        if i is None:
            return float("nan")
        return steering_total_variation(self.final_scenario.actions, i)

    def to_dict(self) -> dict:
        return {
            "success": self.success,
            "iterations_used": self.iterations_used,
            "collision": None if self.collision is None else {"step": self.collision[0], "agent": self.collision[1]},
            "chosen_adversary": self.chosen_adversary,
            "impact_point": None if self.impact_point is None else list(self.impact_point),
            "rear_impact": self.rear_impact,
            "collided_at_start": self.collided_at_start,
            "mode": self.mode,
            "candidates": list(self.candidates),
            "masked_per_iteration": [list(m) for m in self.masked_per_iteration],
            "final_cost": None if not self.cost_trace else self.cost_trace[-1].total,
            "config": self.config,
        }

    def trace_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TRACE_FIELDS)
        for r in self.cost_trace:
            w.writerow([r.iteration, repr(r.ego_collision), repr(r.adv_collision), repr(r.deviation),
                        repr(r.total), r.chosen_adversary, " ".join(str(i) for i in r.masked)])
        return buf.getvalue()


def steering_total_variation(actions, agent: int) -> float:
    """sum_k |steer[k+1] - steer[k]| for background agent ``agent`` (1-based)."""
    steer = np.asarray(actions, float)[agent - 1, :, 1]
    return float(np.abs(np.diff(steer)).sum())


def _impact(traj, lengths, widths, hit):
    k, i = hit
    a = agent_box(traj[0, k], lengths[0], widths[0])
    b = agent_box(traj[i, k], lengths[i], widths[i])
    p = impact_point(a, b)
    if p is None:
        return None
    local = to_frame(p, traj[0, k, :2], traj[0, k, 3])
    return float(local[0]), float(local[1])


def scenario_drivable(scenario: Scenario, config: GeneratorConfig = GeneratorConfig()) -> Optional[DrivableMap]:
    if not any(p.kind == "boundary" for p in scenario.road_graph):
        return None
    return build_drivable_map(scenario.road_graph, config.map_resolution, config.map_sigma)


def generate(scenario: Scenario, ego_policy: Optional[EgoPolicy] = None,
             config: GeneratorConfig = GeneratorConfig(), drivable: Optional[DrivableMap] = None,
             ) -> GenerationResult:
    """Optimize background actions until the ego collides or the budget runs out.

    Raises InputNotCollisionFree if the logged trajectories already collide
    and NoCandidates if filtering leaves nothing to optimize.
    """
    if ego_policy is None:
        ego_policy = default_ego_policy()
    if first_collision(scenario) is not None:
        raise InputNotCollisionFree(f"input collides at {first_collision(scenario)}")
    scenario = with_estimated_actions(scenario, config.bounds)
    candidates = candidate_adversaries(scenario, config)
    if drivable is None:
        drivable = scenario_drivable(scenario, config)
    cost_fn = TotalCost(scenario, candidates, config.weights, drivable)
    lengths, widths = scenario.lengths, scenario.widths

    n = scenario.n_background
    actions = config.bounds.clip(scenario.actions)
    cand_rows = np.zeros((n, 1, 1), bool)
    cand_rows[np.asarray(candidates) - 1] = True
    opt = Adam(config.learning_rate, config.beta1, config.beta2, config.eps)
    trace, masked_log = [], []
    hit, traj, used = None, None, config.max_iters

    for it in range(config.max_iters + 1):
        traj, tape = simulate(scenario, ego_policy, actions, config.ego_grad, drivable,
                              record=it < config.max_iters)
        hit = first_collision_in(traj, lengths, widths)
        if hit is not None or it == config.max_iters:
            used = it
            break
        _, grad = backward(tape, cost_fn)
        bd = tape.cost.breakdown
        update = np.broadcast_to(cand_rows, actions.shape).copy()
        masked = ()
        if config.mode == REGENTS:
            flags = steering_mask(traj, config, candidates)
            update[flags, :, 1] = False
            masked = tuple(int(i) + 1 for i in np.nonzero(flags)[0])
        trace.append(TraceRow(it, bd.ego_collision, bd.adv_collision, bd.deviation, bd.total,
                              bd.chosen_adversary, masked))
        masked_log.append(masked)
        actions = config.bounds.clip(opt.step(actions, grad, update))

    final = scenario.replace(trajectories=traj, actions=actions)
    success = hit is not None
    chosen = cost_fn(traj).breakdown.chosen_adversary
    return GenerationResult(
        success=success,
        iterations_used=used,
        collision=hit,
        final_scenario=final,
        cost_trace=trace,
        candidates=tuple(candidates),
        masked_per_iteration=masked_log,
        mode=config.mode,
        chosen_adversary=chosen,
        impact_point=_impact(traj, lengths, widths, hit) if success else None,
        collided_at_start=success and used == 0,
        config=config.to_dict(),
    )


__all__ = [
    "Adam", "ConfigError", "GenerationResult", "GeneratorConfig", "GeneratorError", "InputNotCollisionFree",
    "KING", "NoCandidates", "REGENTS", "TRACE_FIELDS", "TraceRow", "candidate_adversaries", "generate",
    "in_orange_zone", "in_red_zone", "is_static", "orange_zone", "red_zone", "scenario_drivable",
    "steering_mask", "steering_total_variation",
]
