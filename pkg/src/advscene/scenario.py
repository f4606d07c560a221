"""Scenario data model, collision predicates and JSON serialization."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import jsonschema
import numpy as np

from .geometry import box_corners, boxes_overlap_batch, wrap_angle, wrap_scalar

MAX_AGENTS = 32

# state column layout used by every trajectory array
X, Y, SPEED, YAW = 0, 1, 2, 3


class ScenarioError(ValueError):
    """Raised when a scenario violates the data model."""


class SchemaError(ScenarioError):
    """Raised when a scenario file does not match the JSON schema."""

    def __init__(self, message: str, path: str):
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass(frozen=True)
class AgentState:
    position: tuple
    speed: float
    yaw: float

    def __post_init__(self):
        px, py = (float(v) for v in self.position)
        object.__setattr__(self, "position", (px, py))
        if self.speed < 0:
            raise ScenarioError(f"speed must be non-negative, got {self.speed}")
        object.__setattr__(self, "speed", float(self.speed))
        object.__setattr__(self, "yaw", wrap_scalar(float(self.yaw)))

    @classmethod
    def from_array(cls, q) -> "AgentState":
        return cls((q[0], q[1]), q[2], q[3])

    def as_array(self) -> np.ndarray:
        return np.array([self.position[0], self.position[1], self.speed, self.yaw])


@dataclass(frozen=True)
class AgentMetadata:
    length: float
    width: float
    lf: float
    lr: float
    is_ego: bool = False

    def __post_init__(self):
        for name in ("length", "width", "lf", "lr"):
            if not getattr(self, name) > 0:
                raise ScenarioError(f"agent {name} must be positive, got {getattr(self, name)}")
        if self.lf + self.lr > self.length + 1e-12:
            raise ScenarioError(f"wheelbase lf+lr={self.lf + self.lr} exceeds length {self.length}")


@dataclass(frozen=True)
class Action:
    acceleration: float
    steering: float


@dataclass(frozen=True)
class RoadPolyline:
    kind: str  # "boundary" | "lane_center"
    points: tuple

    def __post_init__(self):
        if self.kind not in ("boundary", "lane_center"):
            raise ScenarioError(f"unknown road polyline kind {self.kind!r}")
        object.__setattr__(self, "points", tuple((float(x), float(y)) for x, y in self.points))

    def as_array(self) -> np.ndarray:
        return np.array(self.points, float).reshape(-1, 2)


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Scenario:
    """A driving scenario over T steps.

    ``trajectories`` has shape (n+1, T, 4) with columns (x, y, speed, yaw);
    row 0 is the ego.  ``actions`` has shape (n, T-1, 2) with columns
    (acceleration, steering) for the background agents, or is None when the
    actions still have to be estimated from the trajectories.
    """

    agents: tuple
    trajectories: np.ndarray
    dt: float
    target_point: np.ndarray
    road_graph: tuple = ()
    signals: tuple = ()
    actions: Optional[np.ndarray] = None
    max_agents: int = field(default=MAX_AGENTS, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "agents", tuple(self.agents))
        object.__setattr__(self, "road_graph", tuple(self.road_graph))
        object.__setattr__(self, "signals", tuple(self.signals))
        traj = np.array(self.trajectories, dtype=float)
        if traj.ndim != 3 or traj.shape[-1] != 4:
            raise ScenarioError(f"trajectories must have shape (agents, T, 4), got {traj.shape}")
        traj[..., YAW] = wrap_angle(traj[..., YAW])
        object.__setattr__(self, "trajectories", _frozen(traj))
        object.__setattr__(self, "target_point", _frozen(np.asarray(self.target_point, float).reshape(2)))
        if self.actions is not None:
            object.__setattr__(self, "actions", _frozen(self.actions))
        self.validate()

    def validate(self):
        if not self.dt > 0:
            raise ScenarioError(f"dt must be positive, got {self.dt}")
        n_agents = len(self.agents)
        if n_agents < 1:
            raise ScenarioError("scenario needs at least the ego agent")
        if n_agents > self.max_agents:
            raise ScenarioError(f"{n_agents} agents exceeds cap of {self.max_agents}")
        egos = [i for i, a in enumerate(self.agents) if a.is_ego]
        if egos != [0]:
            raise ScenarioError(f"exactly agent 0 must be the ego, got ego flags at {egos}")
        if self.trajectories.shape[0] != n_agents:
            raise ScenarioError(
                f"{self.trajectories.shape[0]} trajectories for {n_agents} agents")
        if self.horizon < 2:
            raise ScenarioError(f"horizon T must be >= 2, got {self.horizon}")
        if (self.trajectories[..., SPEED] < 0).any():
            raise ScenarioError("negative speed in trajectories")
        if not np.isfinite(self.trajectories).all():
            raise ScenarioError("non-finite values in trajectories")
        if self.actions is not None:
            want = (n_agents - 1, self.horizon - 1, 2)
            if self.actions.shape != want:
                raise ScenarioError(f"actions shape {self.actions.shape}, expected {want}")

    @property
    def horizon(self) -> int:
        return self.trajectories.shape[1]

    @property
    def n_background(self) -> int:
        return len(self.agents) - 1

    @property
    def lengths(self) -> np.ndarray:
        return np.array([a.length for a in self.agents])

    @property
    def widths(self) -> np.ndarray:
        return np.array([a.width for a in self.agents])

    def state(self, agent: int, k: int) -> AgentState:
        return AgentState.from_array(self.trajectories[agent, k])

    def replace(self, **changes) -> "Scenario":
        return dataclasses.replace(self, **changes)

    def __eq__(self, other):
        if not isinstance(other, Scenario):
            return NotImplemented
        if (self.actions is None) != (other.actions is None):
            return False
        return (
            self.agents == other.agents
            and self.dt == other.dt
            and self.road_graph == other.road_graph
            and self.signals == other.signals
            and np.array_equal(self.trajectories, other.trajectories)
            and np.array_equal(self.target_point, other.target_point)
            and (self.actions is None or np.array_equal(self.actions, other.actions))
        )

    __hash__ = None


def agent_corners(trajectories, lengths, widths) -> np.ndarray:
    """Corners for every agent and step, shape (N, T, 4, 2)."""
    t = np.asarray(trajectories, float)
    return box_corners(t[..., X], t[..., Y], t[..., YAW],
                       np.asarray(lengths, float)[:, None], np.asarray(widths, float)[:, None])


def ego_overlaps(trajectories, lengths, widths) -> np.ndarray:
    """Boolean (n, T) table: background agent i+1 overlaps the ego at step k."""
    corners = agent_corners(trajectories, lengths, widths)
    n, T = corners.shape[0] - 1, corners.shape[1]
    if n == 0:
        return np.zeros((0, T), bool)
    ego = np.broadcast_to(corners[0], (n, T, 4, 2))
    return boxes_overlap_batch(ego.reshape(-1, 4, 2), corners[1:].reshape(-1, 4, 2)).reshape(n, T)


def first_collision_in(trajectories, lengths, widths):
    table = ego_overlaps(trajectories, lengths, widths)
    if not table.any():
        return None
    steps = np.nonzero(table.any(axis=0))[0]
    k = int(steps[0])
    i = int(np.nonzero(table[:, k])[0][0]) + 1
    return k, i


def first_collision(scenario: Scenario):
    """Earliest (step, adversary index) where an adversary overlaps the ego.

    Ties at the same step go to the lowest agent index.  Returns None when
    the scenario is collision-free.
    """
    return first_collision_in(scenario.trajectories, scenario.lengths, scenario.widths)


# ---------------------------------------------------------------------------
# serialization

_NUM = {"type": "number"}
_POINT = {"type": "array", "items": _NUM, "minItems": 2, "maxItems": 2}

SCENARIO_SCHEMA = {
    "type": "object",
    "required": ["dt", "target_point", "road_graph", "agents", "signals", "trajectories", "actions"],
    "properties": {
        "dt": {"type": "number", "exclusiveMinimum": 0},
        "target_point": _POINT,
        "road_graph": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["kind", "points"],
                "properties": {
                    "kind": {"enum": ["boundary", "lane_center"]},
                    "points": {"type": "array", "items": _POINT},
                },
            },
        },
        "agents": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["length", "width", "lf", "lr", "is_ego"],
                "properties": {
                    "length": {"type": "number", "exclusiveMinimum": 0},
                    "width": {"type": "number", "exclusiveMinimum": 0},
                    "lf": {"type": "number", "exclusiveMinimum": 0},
                    "lr": {"type": "number", "exclusiveMinimum": 0},
                    "is_ego": {"type": "boolean"},
                },
            },
        },
        "signals": {"type": "array"},
        "trajectories": {
            "type": "array",
            "items": {
                "type": "array",
                "items": {"type": "array", "items": _NUM, "minItems": 4, "maxItems": 4},
            },
        },
        "actions": {
            "oneOf": [
                {"type": "null"},
                {
                    "type": "array",
                    "items": {
                        "type": "array",
                        "items": {"type": "array", "items": _NUM, "minItems": 2, "maxItems": 2},
                    },
                },
            ]
        },
    },
}

_VALIDATOR = jsonschema.Draft7Validator(SCENARIO_SCHEMA)


def _json_path(error) -> str:
    parts = ["$"]
    for p in error.absolute_path:
        parts.append(f"[{p}]" if isinstance(p, int) else f".{p}")
    return "".join(parts)


def scenario_to_dict(s: Scenario) -> dict:
    return {
        "dt": s.dt,
        "target_point": s.target_point.tolist(),
        "road_graph": [{"kind": r.kind, "points": [list(p) for p in r.points]} for r in s.road_graph],
        "agents": [
            {"length": a.length, "width": a.width, "lf": a.lf, "lr": a.lr, "is_ego": a.is_ego}
            for a in s.agents
        ],
        "signals": list(s.signals),
        "trajectories": s.trajectories.tolist(),
        "actions": None if s.actions is None else s.actions.tolist(),
    }


def scenario_from_dict(data: Any, max_agents: int = MAX_AGENTS) -> Scenario:
    errors = sorted(_VALIDATOR.iter_errors(data), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        raise SchemaError(err.message, _json_path(err))

    trajs = data["trajectories"]
    if len(trajs) != len(data["agents"]):
        raise ScenarioError(f"{len(trajs)} trajectories for {len(data['agents'])} agents")
    T = len(trajs[0]) if trajs else 0
    for i, tr in enumerate(trajs):
        if len(tr) != T:
            raise ScenarioError(f"trajectory length mismatch: agent {i} has {len(tr)} steps, agent 0 has {T}")
    actions = data["actions"]
    if actions is not None:
        if len(actions) != len(trajs) - 1:
            raise ScenarioError(f"actions given for {len(actions)} background agents, expected {len(trajs) - 1}")
        for i, a in enumerate(actions):
            if len(a) != T - 1:
                raise ScenarioError(f"action length mismatch: agent {i + 1} has {len(a)} actions, expected {T - 1}")
        actions = np.array(actions, float).reshape(len(trajs) - 1, max(T - 1, 0), 2)

    return Scenario(
        agents=tuple(AgentMetadata(**a) for a in data["agents"]),
        trajectories=np.array(trajs, float).reshape(len(trajs), T, 4),
        dt=float(data["dt"]),
        target_point=np.array(data["target_point"], float),
        road_graph=tuple(RoadPolyline(r["kind"], r["points"]) for r in data["road_graph"]),
        signals=tuple(data["signals"]),
        actions=actions,
        max_agents=max_agents,
    )


def dumps_scenario(s: Scenario) -> str:
    return json.dumps(scenario_to_dict(s), indent=1)


def save_scenario(s: Scenario, path) -> None:
    Path(path).write_text(dumps_scenario(s))


def load_scenario(path, max_agents: int = MAX_AGENTS) -> Scenario:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(str(exc), "$") from exc
    return scenario_from_dict(data, max_agents=max_agents)


__all__ = [
    "Action", "AgentMetadata", "AgentState", "RoadPolyline", "Scenario", "ScenarioError", "SchemaError",
    "dumps_scenario", "first_collision", "first_collision_in", "load_scenario", "save_scenario",
    "scenario_from_dict", "scenario_to_dict",
    "agent_corners", "ego_overlaps", "MAX_AGENTS",
]
