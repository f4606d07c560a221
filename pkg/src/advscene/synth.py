"""Synthetic scenario templates.

Every template places the ego at the origin heading along +x at constant
speed and builds background agents whose logged trajectories are exact
bicycle-model rollouts (piecewise constant steering, zero acceleration).
The target point is the ego's final logged position.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np
from shapely.geometry import LineString

from .kinematics import rollout_array
from .scenario import (AgentMetadata, RoadPolyline, Scenario, ScenarioError, agent_corners,
                       first_collision)
from .geometry import box_distance_batch, boxes_overlap_batch

TEMPLATES = ("straight_follow", "crossing", "merging", "oncoming")
EXTRA_KINDS = ("parked", "follower", "traffic")

CAR = AgentMetadata(length=4.5, width=2.0, lf=1.4, lr=1.4)
EGO = AgentMetadata(length=4.5, width=2.0, lf=1.4, lr=1.4, is_ego=True)


class SynthError(ScenarioError):
    """Template parameters that cannot produce a valid collision-free scenario."""


@dataclass(frozen=True)
class SynthParams:
    """Template parameters.  Distances in meters, speeds in m/s, angles in degrees."""

    horizon: int = 50
    dt: float = 0.1
    ego_speed: float = 10.0
    adv_speed: float = 10.0
    gap: float = 20.0  # straight_follow: center-to-center distance ahead
    yaw_offset_deg: float = 0.0
    lateral_offset: float = 0.0
    crossing_angle_deg: float = 90.0
    miss_distance: float = 5.0
    merge_angle_deg: float = 12.0
    merge_gap: float = 8.0  # merging: longitudinal lead over the ego at the horizon
    oncoming_offset: float = 4.0
    lane_width: float = 3.5
    n_background: int = 1
    extras: tuple = ()
    rear_gap: float = 10.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "extras", tuple(self.extras))
        if not 2 <= self.horizon <= 1000:
            raise SynthError(f"horizon must lie in [2, 1000], got {self.horizon}")
        for name in ("ego_speed", "adv_speed"):
            v = getattr(self, name)
            if not 0 <= v <= 40:
                raise SynthError(f"{name} must lie in [0, 40] m/s, got {v}")
        if not 1 <= self.n_background <= 31:
            raise SynthError(f"n_background must lie in [1, 31], got {self.n_background}")
        if len(self.extras) > self.n_background - 1:
            raise SynthError(f"{len(self.extras)} extras do not fit in {self.n_background - 1} free slots")
        bad = [e for e in self.extras if e not in EXTRA_KINDS]
        if bad:
            raise SynthError(f"unknown extra agent kinds {bad}; choose from {EXTRA_KINDS}")
        if not self.dt > 0:
            raise SynthError("dt must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthParams":
        names = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise SynthError(f"unknown template parameters {unknown}")
        return cls(**d)


@dataclass
class _Builder:
    p: SynthParams
    T: int
    states: list = field(default_factory=list)  # (T, 4) arrays, ego first
    metas: list = field(default_factory=list)
    boundaries: list = field(default_factory=list)  # RoadPolyline
    centers: list = field(default_factory=list)

    def add(self, traj, meta=CAR):
        self.states.append(np.asarray(traj, float))
        self.metas.append(meta)


def _constant(x, y, speed, yaw, T, dt):
    """Straight constant-speed trajectory."""
    t = np.arange(T) * dt
    out = np.empty((T, 4))
    out[:, 0] = x + speed * t * math.cos(yaw)
    out[:, 1] = y + speed * t * math.sin(yaw)
    out[:, 2] = speed
    out[:, 3] = yaw
    return out


def _steer_for_turn(dpsi, speed, steps, dt, meta=CAR):
    """Constant steering that turns ``dpsi`` radians over ``steps`` steps."""
    if steps <= 0 or speed <= 0:
        raise SynthError("turn needs positive speed and duration")
    sb = dpsi * meta.lr / (speed * steps * dt)
    if abs(sb) >= math.sin(math.atan(meta.lr / (meta.lf + meta.lr) * math.tan(0.45))):
        raise SynthError(f"turn of {math.degrees(dpsi):.1f} deg is too tight for the steering bound")
    beta = math.asin(sb)
    return math.atan(math.tan(beta) * (meta.lf + meta.lr) / meta.lr)


def _straight_road(b: _Builder, x0, x1, y_right, y_left, lane_ys):
    b.boundaries.append(RoadPolyline("boundary", [(x0, y_right), (x1, y_right)]))
    b.boundaries.append(RoadPolyline("boundary", [(x0, y_left), (x1, y_left)]))
    for y in lane_ys:
        b.centers.append(RoadPolyline("lane_center", [(x0, y), (x1, y)]))


def _corridor(b: _Builder, path_xy, half_width):
    """Closed boundary ring around a path (a side road or ramp)."""
    ring = LineString(path_xy).buffer(half_width, cap_style="flat")
    b.boundaries.append(RoadPolyline("boundary", [tuple(p) for p in np.asarray(ring.exterior.coords)]))
    b.centers.append(RoadPolyline("lane_center", [tuple(p) for p in np.asarray(path_xy)]))


def _main_road(b: _Builder, x_min, x_max):
    lw = b.p.lane_width
    # three lanes: right (-lw), ego (0), left (+lw)
    _straight_road(b, x_min, x_max, -1.5 * lw, 1.5 * lw, (-lw, 0.0, lw))


def _straight_follow(b: _Builder):
    p, T = b.p, b.T
    b.add(_constant(p.gap, p.lateral_offset, p.adv_speed, math.radians(p.yaw_offset_deg), T, p.dt))


def _crossing(b: _Builder):
    p, T, dt = b.p, b.T, b.p.dt
    theta = math.radians(p.crossing_angle_deg)
    horizon_s = (T - 1) * dt
    xc = max(p.ego_speed * horizon_s * 0.5, 12.0)
    t_e = xc / p.ego_speed if p.ego_speed > 0 else horizon_s * 0.5
    heading = np.array([math.cos(theta), math.sin(theta)])
    ego = _constant(0.0, 0.0, p.ego_speed, 0.0, T, dt)
    # delay the adversary's passage until the closest approach respects the miss distance
    lag = p.miss_distance
    for _ in range(400):
        start = np.array([xc, 0.0]) - heading * (p.adv_speed * t_e + lag)
        adv = _constant(start[0], start[1], p.adv_speed, theta, T, dt)
        if _min_gap(ego, adv) >= p.miss_distance:
            break
        lag += 0.5
    else:
        raise SynthError("could not time the crossing agent to miss the ego")
    b.add(adv)
    path = np.array([start - heading * 10.0, start + heading * (p.adv_speed * horizon_s + 10.0)])
    _corridor(b, path, 1.5 * p.lane_width)


def _merging(b: _Builder):
    p, T, dt = b.p, b.T, b.p.dt
    angle = math.radians(p.merge_angle_deg)
    turn_steps = max(1, int(0.6 * (T - 1)))
    steer = _steer_for_turn(-angle, p.adv_speed, turn_steps, dt)
    acts = np.zeros((T - 1, 2))
    acts[:turn_steps, 1] = steer
    traj = rollout_array([0.0, 0.0, p.adv_speed, angle], acts, CAR.lf, CAR.lr, dt)
    # shift so the adversary ends in the right lane, merge_gap ahead of the ego
    ego_end = p.ego_speed * (T - 1) * dt
    traj[:, 0] += ego_end + p.merge_gap - traj[-1, 0]
    traj[:, 1] += -p.lane_width - traj[-1, 1]
    b.add(traj)
    lead_in = traj[0, :2] - 10.0 * np.array([math.cos(angle), math.sin(angle)])
    _corridor(b, np.vstack([lead_in, traj[: turn_steps + 1, :2]]), 0.75 * p.lane_width)


def _oncoming(b: _Builder):
    p, T, dt = b.p, b.T, b.p.dt
    t_meet = 0.5 * (T - 1) * dt
    x0 = (p.ego_speed + p.adv_speed) * t_meet
    b.add(_constant(x0, p.oncoming_offset, p.adv_speed, math.pi, T, dt))


_TEMPLATES = {
    "straight_follow": _straight_follow,
    "crossing": _crossing,
    "merging": _merging,
    "oncoming": _oncoming,
}


def _min_gap(a, b):
    """Smallest box-to-box distance between two car trajectories."""
    c = agent_corners(np.stack([a, b]), [CAR.length] * 2, [CAR.width] * 2)
    return float(box_distance_batch(c[0], c[1])[0].min())


def _clear(b: _Builder, traj, margin=0.5):
    """True if ``traj`` stays clear of every agent already placed."""
    lengths = np.array([CAR.length] * 2)
    widths = np.array([CAR.width + 2 * margin] * 2)
    for other in b.states:
        c = agent_corners(np.stack([traj, other]), lengths + 2 * margin, widths)
        if boxes_overlap_batch(c[0], c[1]).any():
            return False
    return True


def _add_extras(b: _Builder, kinds, rng):
    p, T, dt = b.p, b.T, b.p.dt
    lw = p.lane_width
    reach = max(p.ego_speed * (T - 1) * dt, 30.0)
    for kind in kinds:
        for _ in range(200):
            if kind == "parked":
                x = rng.uniform(0.3 * reach, 0.7 * reach)
                y = rng.choice([-lw, lw])
                traj = _constant(x, y, 0.0, 0.0, T, dt)
            elif kind == "follower":
                x = -p.rear_gap - rng.uniform(0.0, 4.0)
                traj = _constant(x, rng.uniform(-0.3, 0.3), p.ego_speed, 0.0, T, dt)
            else:
                x = rng.uniform(-15.0, reach)
                y = rng.choice([-lw, lw])
                traj = _constant(x, y, rng.uniform(0.5, 1.2) * max(p.ego_speed, 2.0), 0.0, T, dt)
            if _clear(b, traj):
                b.add(traj)
                break
        else:
            raise SynthError(f"could not place extra {kind!r} agent without overlap")


def synth_scenario(template: str, params: SynthParams | dict | None = None) -> Scenario:
    """Build a collision-free scenario from a named template.

    Raises SynthError for unknown templates and for parameters that put the
    ego in contact with another agent anywhere on the logged horizon.
    """
    if template not in _TEMPLATES:
        raise SynthError(f"unknown template {template!r}; choose from {TEMPLATES}")
    if params is None:
        params = SynthParams()
    elif isinstance(params, dict):
        params = SynthParams.from_dict(params)
    p = params
    T = p.horizon
    b = _Builder(p, T)
    ego = _constant(0.0, 0.0, p.ego_speed, 0.0, T, p.dt)
    b.add(ego, EGO)
    _TEMPLATES[template](b)

    rng = np.random.default_rng(p.seed)
    fill = p.n_background - 1 - len(p.extras)
    kinds = list(p.extras) + [str(rng.choice(["parked", "traffic"])) for _ in range(fill)]
    _add_extras(b, kinds, rng)

    xs = np.concatenate([s[:, 0] for s in b.states])
    _main_road(b, float(xs.min()) - 30.0, float(xs.max()) + 30.0)

    s = Scenario(
        agents=tuple(b.metas),
        trajectories=np.stack(b.states),
        dt=p.dt,
        target_point=ego[-1, :2],
        road_graph=tuple(b.boundaries + b.centers),
    )
    hit = first_collision(s)
    if hit is not None:
        raise SynthError(f"template parameters produce a collision at step {hit[0]} with agent {hit[1]}")
    return s


def canonical_params() -> SynthParams:
    """Parameters of the reference straight_follow case used in tests and docs."""
    return SynthParams(horizon=80, ego_speed=3.0, adv_speed=3.0, gap=15.0, yaw_offset_deg=3.0)


def canonical_scenario() -> Scenario:
    return synth_scenario("straight_follow", canonical_params())


SUITE_FAMILIES = ("follow_follower", "crossing_parked", "oncoming_parked", "merging_follower",
                  "follow_traffic")


def _family_params(family: str, rng) -> tuple:
    u = float(rng.uniform(3.0, 6.0))
    common = dict(horizon=80, ego_speed=u, adv_speed=float(rng.uniform(0.8, 1.2)) * u,
                  seed=int(rng.integers(2**31)))
    if family == "follow_follower":
        return "straight_follow", dict(common, adv_speed=u, gap=float(rng.uniform(12.0, 16.0)),
                                       yaw_offset_deg=float(rng.uniform(-4.0, 4.0)),
                                       n_background=2, extras=("follower",),
                                       rear_gap=float(rng.uniform(7.0, 10.0)))
    if family == "crossing_parked":
        return "crossing", dict(common, crossing_angle_deg=float(rng.choice([-1, 1]) * rng.uniform(60, 120)),
                                n_background=2, extras=("parked",))
    if family == "oncoming_parked":
        return "oncoming", dict(common, oncoming_offset=float(rng.uniform(3.5, 5.0)),
                                n_background=2, extras=("parked",))
    if family == "merging_follower":
        return "merging", dict(common, merge_angle_deg=float(rng.uniform(8.0, 15.0)),
                               merge_gap=float(rng.uniform(4.0, 10.0)), n_background=2,
                               extras=("follower",), rear_gap=float(rng.uniform(7.0, 10.0)))
    if family == "follow_traffic":
        return "straight_follow", dict(common, gap=float(rng.uniform(13.0, 18.0)),
                                       yaw_offset_deg=float(rng.uniform(-3.0, 3.0)),
                                       n_background=int(rng.integers(2, 5)))
    raise SynthError(f"unknown suite family {family!r}")


def synth_suite(n: int = 20, seed: int = 7) -> list:
    """Deterministic mixed suite of ``n`` collision-free scenarios.

    Families cycle through SUITE_FAMILIES; each pairs a moving adversary
    with a parked car, a follower or lane traffic.  Returns a list of
    ``(name, template, params, scenario)`` tuples.
    """
    if n < 0:
        raise SynthError("suite size must be non-negative")
    rng = np.random.default_rng(seed)
    out = []
    for j in range(n):
        family = SUITE_FAMILIES[j % len(SUITE_FAMILIES)]
        for _ in range(100):
            template, kw = _family_params(family, rng)
            params = SynthParams(**kw)
            try:
                s = synth_scenario(template, params)
            except SynthError:
                continue
            out.append((f"{j:03d}_{family}", template, params, s))
            break
        else:
            raise SynthError(f"could not build suite scenario {j} ({family})")
    return out


def random_scenario(rng, horizon: int = 30, n_background: int = 3, dt: float = 0.1,
                    road_half_width: float = 7.0, min_speed: float = 1.0, max_tries: int = 200) -> Scenario:
    """Random collision-free scene for oracle tests.

    Background agents start 8-35 m from the ego with random headings and
    follow smooth random in-bounds actions that keep them moving (speed
    stays above ``min_speed``).  The road is a straight corridor of half
    width ``road_half_width`` along the ego's heading.
    """
    T = horizon
    for _ in range(max_tries):
        u0 = float(rng.uniform(3.0, 10.0))
        ego = _constant(0.0, 0.0, u0, 0.0, T, dt)
        states, metas = [ego], [EGO]
        for _ in range(n_background):
            r = rng.uniform(8.0, 35.0)
            bearing = rng.uniform(-math.pi, math.pi)
            q0 = [r * math.cos(bearing), float(np.clip(r * math.sin(bearing), -9.0, 9.0)),
                  rng.uniform(2.0, 10.0), rng.uniform(-math.pi, math.pi)]
            acc = rng.uniform(-0.3, 0.5) + 0.2 * np.sin(np.linspace(0, rng.uniform(1, 6), T - 1))
            steer = rng.uniform(-0.08, 0.08) + 0.03 * np.cos(np.linspace(0, rng.uniform(1, 6), T - 1))
            traj = rollout_array(q0, np.stack([acc, steer], -1), CAR.lf, CAR.lr, dt)
            if traj[:, 2].min() < min_speed:
                break
            length = float(rng.uniform(3.8, 5.2))
            width = float(rng.uniform(1.7, 2.2))
            states.append(traj)
            metas.append(AgentMetadata(length, width, 0.32 * length, 0.30 * length))
        else:
            x1 = float(np.max([s[:, 0].max() for s in states])) + 40.0
            x0 = float(np.min([s[:, 0].min() for s in states])) - 40.0
            road = (RoadPolyline("boundary", [(x0, -road_half_width), (x1, -road_half_width)]),
                    RoadPolyline("boundary", [(x0, road_half_width), (x1, road_half_width)]))
            s = Scenario(agents=tuple(metas), trajectories=np.stack(states), dt=dt,
                         target_point=ego[-1, :2] + np.array([2.0 * u0, 0.0]), road_graph=road)
            if first_collision(s) is None:
                return s
    raise SynthError("could not draw a collision-free random scenario")


__all__ = [
    "random_scenario", "SUITE_FAMILIES", "synth_suite",
    "CAR", "EGO", "EXTRA_KINDS", "SynthError", "SynthParams", "TEMPLATES", "canonical_params",
    "canonical_scenario", "synth_scenario",
]
