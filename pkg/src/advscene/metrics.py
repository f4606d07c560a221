"""Driving metrics: route completion, infraction score, driving score and
suite-level collision and generation-success rates."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .costs import DrivableMap
from .grad import simulate
from .kinematics import with_estimated_actions
from .scenario import Scenario, agent_corners, first_collision_in

EVENT_TYPES = ("vehicle", "pedestrian", "cyclist", "off_road")


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class InfractionFactors:
    vehicle: float = 0.60
    pedestrian: float = 0.50
    cyclist: float = 0.50
    off_road: float = 0.65

    def factor(self, kind: str) -> float:
        if kind not in EVENT_TYPES:
            raise MetricError(f"unknown infraction type {kind!r}; expected one of {EVENT_TYPES}")
        return getattr(self, kind)


@dataclass(frozen=True)
class Infraction:
    type: str
    step: int


def infraction_score(events, factors: InfractionFactors = InfractionFactors()) -> float:
    """Product of the penalty factors of all events (1.0 for none)."""
    score = 1.0
    for e in events:
        kind = e.type if isinstance(e, Infraction) else e
        score *= factors.factor(kind)
    return score


def _project(points, route):
    """Arc length of the closest point on ``route`` for every point."""
    route = np.asarray(route, float)
    seg = np.diff(route, axis=0)
    seg_len = np.hypot(seg[:, 0], seg[:, 1])
    start = np.concatenate([[0.0], np.cumsum(seg_len)[:-1]])
    pts = np.asarray(points, float).reshape(-1, 2)
    rel = pts[:, None, :] - route[None, :-1, :]
    safe = np.where(seg_len > 0, seg_len * seg_len, 1.0)
    t = np.clip((rel * seg[None]).sum(-1) / safe, 0.0, 1.0)
    closest = route[None, :-1, :] + t[..., None] * seg[None]
    d = np.hypot(*(pts[:, None, :] - closest).transpose(2, 0, 1))
    j = d.argmin(axis=1)
    rows = np.arange(len(pts))
    return start[j] + t[rows, j] * seg_len[j]


def route_length(route) -> float:
    seg = np.diff(np.asarray(route, float), axis=0)
    return float(np.hypot(seg[:, 0], seg[:, 1]).sum())


def route_completion(ego_traj, route, collided_at: Optional[int] = None) -> float:
    """Percent of the route covered, in [0, 100].

    Coverage is the furthest closest-point projection of the ego onto the
    route over steps 0..end, where end is the collision step if given, else
    the last step.
    """
    total = route_length(route)
    if not total > 0:
        raise MetricError("route length must be positive")
    xy = np.asarray(ego_traj, float)[:, :2]
    end = len(xy) - 1 if collided_at is None else min(int(collided_at), len(xy) - 1)
    s = _project(xy[: end + 1], route).max()
    return float(min(max(100.0 * s / total, 0.0), 100.0))


def scenario_route(scenario: Scenario) -> np.ndarray:
    """Straight route from the ego's initial position to the target."""
    return np.stack([scenario.trajectories[0, 0, :2], scenario.target_point])


def off_road_events(ego_traj, length, width, drivable: Optional[DrivableMap], min_steps: int = 3,
                    end: Optional[int] = None) -> list:
    """One off-road event per run of >= ``min_steps`` consecutive steps with
    any ego corner on an out-of-bounds cell; the event step is the run start."""
    if drivable is None:
        return []
    traj = np.asarray(ego_traj, float)
    if end is not None:
        traj = traj[: end + 1]
    corners = agent_corners(traj[None], [length], [width])[0]
    off = (drivable.oob_at(corners.reshape(-1, 2)).reshape(len(traj), 4) >= 0.5).any(axis=1)
    events, run_start = [], None
    for k, flag in enumerate(list(off) + [False]):
        if flag and run_start is None:
            run_start = k
        elif not flag and run_start is not None:
            if k - run_start >= min_steps:
                events.append(Infraction("off_road", run_start))
            run_start = None
    return events


@dataclass
class ScenarioReport:
    name: str
    route_completion: float
    infraction_score: float
    driving_score: float
    collided: bool
    events: list = field(default_factory=list)
    collision: Optional[tuple] = None

    def row(self) -> dict:
        return {
            "name": self.name,
            "route_completion": self.route_completion,
            "infraction_score": self.infraction_score,
            "driving_score": self.driving_score,
            "collided": self.collided,
            "events": " ".join(f"{e.type}@{e.step}" for e in self.events),
        }


def evaluate_trajectories(name: str, scenario: Scenario, trajectories, drivable: Optional[DrivableMap] = None,
                          factors: InfractionFactors = InfractionFactors(), min_off_steps: int = 3
                          ) -> ScenarioReport:
    traj = np.asarray(trajectories, float)
    hit = first_collision_in(traj, scenario.lengths, scenario.widths)
    end = None if hit is None else hit[0]
    events = [] if hit is None else [Infraction("vehicle", hit[0])]
    events += off_road_events(traj[0], scenario.agents[0].length, scenario.agents[0].width, drivable,
                              min_off_steps, end)
    events.sort(key=lambda e: (e.step, e.type))
    rc = route_completion(traj[0], scenario_route(scenario), end)
    inf = infraction_score(events, factors)
    return ScenarioReport(name, rc, inf, rc * inf, hit is not None, events, hit)


def evaluate_scenario(name: str, scenario: Scenario, ego_policy=None, drivable: Optional[DrivableMap] = None,
                      factors: InfractionFactors = InfractionFactors(), min_off_steps: int = 3
                      ) -> ScenarioReport:
    """Run the ego policy in ``scenario`` (background agents follow their
    actions) and score the rollout.  With ``ego_policy=None`` the stored
    trajectories are scored as they are."""
    if ego_policy is None:
        traj = scenario.trajectories
    else:
        if scenario.actions is None:
            scenario = with_estimated_actions(scenario)
        traj, _ = simulate(scenario, ego_policy, scenario.actions, drivable=drivable, record=False)
    return evaluate_trajectories(name, scenario, traj, drivable, factors, min_off_steps)


def _mean(values):
    values = list(values)
    return sum(values) / len(values) if values else None


@dataclass
class SuiteReport:
    label: str
    reports: list
    collision_rate: Optional[float]
    generation_success_rate: Optional[float] = None
    mean_route_completion: Optional[float] = None
    mean_infraction_score: Optional[float] = None
    mean_driving_score: Optional[float] = None

    @classmethod
    def from_reports(cls, label: str, reports: Sequence[ScenarioReport], generation_success_rate=None):
        reports = list(reports)
        rate = 100.0 * sum(r.collided for r in reports) / len(reports) if reports else None
        return cls(label, reports, rate, generation_success_rate,
                   _mean(r.route_completion for r in reports),
                   _mean(r.infraction_score for r in reports),
                   _mean(r.driving_score for r in reports))

    def summary(self) -> dict:
        return {
            "label": self.label,
            "scenarios": len(self.reports),
            "generation_success_rate": self.generation_success_rate,
            "collision_rate": self.collision_rate,
            "route_completion": self.mean_route_completion,
            "infraction_score": self.mean_infraction_score,
            "driving_score": self.mean_driving_score,
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        cols = ["name", "route_completion", "infraction_score", "driving_score", "collided", "events"]
        w = csv.DictWriter(buf, cols, lineterminator="\n")
        w.writeheader()
        for r in self.reports:
            row = r.row()
            for k in ("route_completion", "infraction_score", "driving_score"):
                row[k] = repr(row[k])
            w.writerow(row)
        return buf.getvalue()


def generation_success_rate(original: Sequence[ScenarioReport], generated: Sequence[Optional[ScenarioReport]]):
    """Percent of originally collision-free scenarios whose generated version
    collides.  A missing generated entry (generation was skipped) counts as a
    failure.  None when no original is collision-free."""
    if len(original) != len(generated):
        raise MetricError(f"{len(original)} originals but {len(generated)} generated entries")
    eligible = [(o, g) for o, g in zip(original, generated) if not o.collided]
    if not eligible:
        return None
    wins = sum(1 for _, g in eligible if g is not None and g.collided)
    return 100.0 * wins / len(eligible)


def suite_evaluate(original: Sequence[ScenarioReport], generated: Sequence[Optional[ScenarioReport]],
                   label: str = "generated"):
    """Pair of SuiteReports (original, generated) for index-matched suites."""
    if len(original) != len(generated):
        raise MetricError(f"{len(original)} originals but {len(generated)} generated entries")
    for o, g in zip(original, generated):
        if g is not None and g.name != o.name:
            raise MetricError(f"suite index mismatch: {o.name!r} vs {g.name!r}")
    rate = generation_success_rate(original, generated)
    orig = SuiteReport.from_reports("original", original)
    # a skipped generation leaves the scenario as it was
    gen = SuiteReport.from_reports(label, [o if g is None else g for o, g in zip(original, generated)], rate)
    return orig, gen


__all__ = [
    "EVENT_TYPES", "Infraction", "InfractionFactors", "MetricError", "ScenarioReport", "SuiteReport",
    "evaluate_scenario", "evaluate_trajectories", "generation_success_rate", "infraction_score",
    "off_road_events", "route_completion", "route_length", "scenario_route", "suite_evaluate",
]
