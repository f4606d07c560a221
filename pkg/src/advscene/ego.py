"""Ego agent: BEV observation raster, waypoint planners and PID tracking.

The policy is split observer / planner / controller.  Planners return
waypoints; ``PlanningEgo`` chains a planner with the PID controller and,
when asked, produces the exact local Jacobian of its outputs with respect
to the ego state, the controller memory and (for reactive planners) the
states of the other agents.  The gradient engine uses these Jacobians to
differentiate through the ego's reactions.

Jacobian input layout ``z``:
    [x, y, u, yaw, I_speed, I_heading, e_speed_prev, e_heading_prev, others (n*4)...]
output layout:
    [accel, steer, I_speed', I_heading', e_speed', e_heading']
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Protocol

import numpy as np

from .costs import DrivableMap
from .geometry import wrap_scalar
from .kinematics import ActionBounds
from .scenario import Action, AgentState

N_CTRL = 4
N_Z_EGO = 4 + N_CTRL
N_OUT = 2 + N_CTRL


@dataclass(frozen=True)
class Scene:
    """What the ego sees at one step: its own state, the others, the goal."""

    step: int
    ego: np.ndarray  # (4,)
    others: np.ndarray  # (n, 4)
    lengths: np.ndarray  # (n+1,)
    widths: np.ndarray
    target: np.ndarray
    dt: float
    cruise_speed: float
    drivable: Optional[DrivableMap] = None


# ---------------------------------------------------------------------------
# observation


@dataclass(frozen=True)
class ObservationParams:
    extent: float = 40.0
    resolution: float = 0.5


@dataclass(frozen=True)
class Observation:
    grid: np.ndarray  # (3, H, W): drivable, other agents, ego
    extent: float
    resolution: float

    CHANNELS = ("drivable", "occupancy", "ego")

    def cell_frame_coords(self):
        """(lon, lat) of cell centers in the ego frame; row 0 is the front edge,
        column 0 the left edge."""
        n = self.grid.shape[-1]
        half = self.extent / 2.0
        offs = half - (np.arange(n) + 0.5) * self.resolution
        lon, lat = np.meshgrid(offs, offs, indexing="ij")
        return lon, lat


def _in_box(px, py, state, length, width):
    dx, dy = px - state[0], py - state[1]
    c, s = math.cos(state[3]), math.sin(state[3])
    lon = c * dx + s * dy
    lat = -s * dx + c * dy
    return (np.abs(lon) <= length / 2.0) & (np.abs(lat) <= width / 2.0)


def rasterize_observation(states, lengths, widths, drivable: Optional[DrivableMap] = None,
                          params: ObservationParams = ObservationParams()) -> Observation:
    """Ego-centered, ego-yaw-aligned BEV raster of the scene at one step.

    ``states`` is (N, 4) with the ego in row 0.  Without a map the whole
    plane counts as drivable.
    """
    states = np.asarray(states, float)
    n = int(round(params.extent / params.resolution))
    obs = Observation(np.zeros((3, n, n)), params.extent, params.resolution)
    lon, lat = obs.cell_frame_coords()
    ego = states[0]
    c, s = math.cos(ego[3]), math.sin(ego[3])
    px = ego[0] + c * lon - s * lat
    py = ego[1] + s * lon + c * lat
    grid = obs.grid
    if drivable is None:
        grid[0] = 1.0
    else:
        grid[0] = 1.0 - drivable.oob_at(np.stack([px, py], axis=-1))
    for j in range(1, len(states)):
        grid[1] = np.maximum(grid[1], _in_box(px, py, states[j], lengths[j], widths[j]))
    grid[2] = _in_box(px, py, ego, lengths[0], widths[0])
    return obs


# ---------------------------------------------------------------------------
# planning


@dataclass(frozen=True)
class WaypointPlan:
    points: np.ndarray  # (L, 2) world frame
    local: np.ndarray  # (L, 2) ego frame
    waypoint_dt: float  # seconds between consecutive waypoints
    jac: Optional[np.ndarray] = field(default=None, repr=False)  # d(local)/dz, (L, 2, D)
    branch: tuple = field(default=(), repr=False)


class PlannerPolicy(Protocol):
    reactive: bool

    def plan(self, scene: Scene, need_jac: bool = False) -> WaypointPlan: ...


def _arc(kappa, s):
    """Point at arc length s on a constant-curvature path from the origin
    heading +x, plus d/dkappa and d/ds."""
    phi = kappa * s
    if abs(phi) < 1e-4:
        X = s - kappa * kappa * s ** 3 / 6.0
        Y = kappa * s * s / 2.0 - kappa ** 3 * s ** 4 / 24.0
        dXk = -kappa * s ** 3 / 3.0
        dYk = s * s / 2.0 - kappa * kappa * s ** 4 / 8.0
    else:
        sp, cp = math.sin(phi), math.cos(phi)
        X = sp / kappa
        Y = (1.0 - cp) / kappa
        dXk = (phi * cp - sp) / (kappa * kappa)
        dYk = (phi * sp - (1.0 - cp)) / (kappa * kappa)
    return X, Y, dXk, dYk, math.cos(phi), math.sin(phi)


@dataclass
class PurePursuitPlanner:
    """Waypoints along the pure-pursuit arc from the ego pose to the target.

    The arc curvature is 2 sin(alpha) / D (alpha: target bearing in the ego
    frame, D: distance), clamped to ``max_curvature``; a target behind the
    ego gives a full-lock turn-around arc.  Waypoints sit every ``spacing``
    meters of arc and never past the target distance; once the target is
    behind and within ``arrive_radius`` the plan is a stop.  Near the target the
    spacing is capped so the implied speed is at most sqrt(2 a D), a
    constant-deceleration stopping profile with a = ``stop_decel``.  Other
    agents are ignored.
    """

    n_waypoints: int = 4
    stride: int = 5
    spacing: Optional[float] = None
    cruise_speed: Optional[float] = None
    max_curvature: float = 0.15
    stop_decel: float = 1.0
    arrive_radius: float = 3.0

    reactive = False

    def base_spacing(self, scene: Scene) -> float:
        if self.spacing is not None:
            return self.spacing
        speed = self.cruise_speed if self.cruise_speed is not None else scene.cruise_speed
        return speed * scene.dt * self.stride

    def brake_factor(self, scene: Scene, dim: int):
        return 1.0, (np.zeros(dim) if dim else None), ()

    def plan(self, scene: Scene, need_jac: bool = False) -> WaypointPlan:
        dim = N_Z_EGO + 4 * len(scene.others) if need_jac else 0
        return self._plan(scene, dim)

    def _plan(self, scene: Scene, dim: int) -> WaypointPlan:
        x, y, _, psi = scene.ego
        L = self.n_waypoints
        wdt = scene.dt * self.stride
        grads = dim > 0
        dx, dy = scene.target[0] - x, scene.target[1] - y
        D = math.hypot(dx, dy)
        local = np.zeros((L, 2))
        jac = np.zeros((L, 2, dim)) if grads else None
        if D < 1e-9:
            return self._finish(scene, local, wdt, jac, ("stop",))

        alpha = wrap_scalar(math.atan2(dy, dx) - psi)
        if abs(alpha) > math.pi / 2 and D < self.arrive_radius:
            # target passed: hold position rather than turn back
            return self._finish(scene, local, wdt, jac, ("arrived",))
        if grads:
            g_alpha = np.zeros(dim)
            g_alpha[0], g_alpha[1], g_alpha[3] = dy / (D * D), -dx / (D * D), -1.0
            g_D = np.zeros(dim)
            g_D[0], g_D[1] = -dx / D, -dy / D
        if abs(alpha) <= math.pi / 2:
            kappa = 2.0 * math.sin(alpha) / D
            kbranch = 0
            g_k = (2.0 * math.cos(alpha) / D * g_alpha - 2.0 * math.sin(alpha) / (D * D) * g_D) if grads else None
            if abs(kappa) > self.max_curvature:
                kappa = math.copysign(self.max_curvature, kappa)
                kbranch = 1
                g_k = np.zeros(dim) if grads else None
        else:
            kappa = self.max_curvature if alpha >= 0 else -self.max_curvature
            kbranch = 2
            g_k = np.zeros(dim) if grads else None

        b, g_b, bbranch = self.brake_factor(scene, dim)
        sp0 = self.base_spacing(scene)
        g_sp0 = np.zeros(dim) if grads else None
        cap = math.sqrt(2.0 * self.stop_decel * D) * wdt
        capped = cap < sp0
        if capped:
            sp0 = cap
            g_sp0 = cap / (2.0 * D) * g_D if grads else None
        sp = sp0 * b
        sbranch = []
        for l in range(1, L + 1):
            if l * sp < D:
                s = l * sp
                g_s = l * (sp0 * g_b + b * g_sp0) if grads else None
                sbranch.append(0)
            else:
                s = D
                g_s = g_D if grads else None
                sbranch.append(1)
            X, Yl, dXk, dYk, dXs, dYs = _arc(kappa, s)
            local[l - 1] = X, Yl
            if grads:
                jac[l - 1, 0] = dXk * g_k + dXs * g_s
                jac[l - 1, 1] = dYk * g_k + dYs * g_s
        return self._finish(scene, local, wdt, jac, (kbranch, capped, bbranch, tuple(sbranch)))

    @staticmethod
    def _finish(scene, local, wdt, jac, branch):
        x, y, _, psi = scene.ego
        c, s = math.cos(psi), math.sin(psi)
        pts = np.stack([x + c * local[:, 0] - s * local[:, 1], y + s * local[:, 0] + c * local[:, 1]], axis=-1)
        return WaypointPlan(pts, local, wdt, jac, branch)


@dataclass
class BrakingPlanner(PurePursuitPlanner):
    """Pure pursuit that shortens its waypoint spacing when another agent is
    ahead in the ego's corridor, reaching a full stop at ``stop_gap``."""

    brake_gap: float = 15.0
    stop_gap: float = 3.0
    corridor_half_width: float = 2.0

    reactive = True

    def brake_factor(self, scene: Scene, dim: int):
        x, y, _, psi = scene.ego
        c, s = math.cos(psi), math.sin(psi)
        best, best_j = 1.0, -1
        for j, o in enumerate(scene.others):
            rx, ry = o[0] - x, o[1] - y
            lon = c * rx + s * ry
            lat = -s * rx + c * ry
            if lon <= 0 or abs(lat) >= self.corridor_half_width:
                continue
            gap = lon - (scene.lengths[0] + scene.lengths[j + 1]) / 2.0
            f = (gap - self.stop_gap) / (self.brake_gap - self.stop_gap)
            if f < best:
                best, best_j, best_lat = f, j, lat
        if best_j < 0:
            return 1.0, (np.zeros(dim) if dim else None), (-1, 0)
        clipped = 1 if best <= 0 else 0
        b = max(best, 0.0)
        g = np.zeros(dim) if dim else None
        if dim and not clipped:
            k = 1.0 / (self.brake_gap - self.stop_gap)
            g[0], g[1], g[3] = -c * k, -s * k, best_lat * k
            off = N_Z_EGO + 4 * best_j
            g[off], g[off + 1] = c * k, s * k
        return b, g, (best_j, clipped)


def plan_waypoints(state: AgentState, target, scene: Scene, policy: PlannerPolicy) -> WaypointPlan:
    scene = Scene(scene.step, state.as_array(), scene.others, scene.lengths, scene.widths,
                  np.asarray(target, float), scene.dt, scene.cruise_speed, scene.drivable)
    return policy.plan(scene)


# ---------------------------------------------------------------------------
# control


@dataclass(frozen=True)
class PidGains:
    speed_kp: float = 1.0
    speed_ki: float = 0.1
    speed_kd: float = 0.0
    heading_kp: float = 1.5
    heading_ki: float = 0.0
    heading_kd: float = 0.3
    integral_limit: float = 5.0
    lookahead: int = 3  # 1-based waypoint index


@dataclass(frozen=True)
class PidState:
    speed_integral: float = 0.0
    heading_integral: float = 0.0
    prev_speed_error: float = 0.0
    prev_heading_error: float = 0.0
    started: bool = False

    def vector(self):
        return np.array([self.speed_integral, self.heading_integral, self.prev_speed_error,
                         self.prev_heading_error])


def _pid_law(la, first, speed, pid: PidState, gains: PidGains, bounds: ActionBounds, dt, wdt):
    """Scalar PID law on ego-frame waypoints.

    Returns outputs (6,), their partials with respect to
    [la_x, la_y, first_x, first_y, speed, I_u, I_h, e_u_prev, e_h_prev] as a
    (6, 9) array, and the discrete branch taken.
    """
    P = np.zeros((N_OUT, 9))
    lx, ly = la
    r2 = lx * lx + ly * ly
    if r2 > 0:
        e_h = math.atan2(ly, lx)
        de_h = np.array([-ly / r2, lx / r2, 0, 0, 0, 0, 0, 0, 0])
    else:
        e_h, de_h = 0.0, np.zeros(9)
    fx, fy = first
    dist = math.hypot(fx, fy)
    target_speed = dist / wdt
    de_u = np.zeros(9)
    if dist > 0:
        de_u[2], de_u[3] = fx / (dist * wdt), fy / (dist * wdt)
    de_u[4] = -1.0
    e_u = target_speed - speed

    lim = gains.integral_limit
    iu_raw = pid.speed_integral + e_u * dt
    iu = min(max(iu_raw, -lim), lim)
    d_iu = np.zeros(9)
    if -lim < iu_raw < lim:
        d_iu = de_u * dt
        d_iu[5] += 1.0
    ih_raw = pid.heading_integral + e_h * dt
    ih = min(max(ih_raw, -lim), lim)
    d_ih = np.zeros(9)
    if -lim < ih_raw < lim:
        d_ih = de_h * dt
        d_ih[6] += 1.0

    acc = gains.speed_kp * e_u + gains.speed_ki * iu
    d_acc = gains.speed_kp * de_u + gains.speed_ki * d_iu
    steer = gains.heading_kp * e_h + gains.heading_ki * ih
    d_steer = gains.heading_kp * de_h + gains.heading_ki * d_ih
    if pid.started:
        acc += gains.speed_kd * (e_u - pid.prev_speed_error) / dt
        d_acc = d_acc + gains.speed_kd / dt * de_u
        d_acc[7] -= gains.speed_kd / dt
        steer += gains.heading_kd * (e_h - pid.prev_heading_error) / dt
        d_steer = d_steer + gains.heading_kd / dt * de_h
        d_steer[8] -= gains.heading_kd / dt

    acc_c = min(max(acc, bounds.accel_min), bounds.accel_max)
    if acc_c != acc:
        d_acc = np.zeros(9)
    steer_c = min(max(steer, -bounds.steer_max), bounds.steer_max)
    if steer_c != steer:
        d_steer = np.zeros(9)

    out = np.array([acc_c, steer_c, iu, ih, e_u, e_h])
    P[0], P[1], P[2], P[3], P[4], P[5] = d_acc, d_steer, d_iu, d_ih, de_u, de_h
    branch = (r2 > 0, dist > 0, iu == iu_raw, ih == ih_raw, acc_c == acc, steer_c == steer)
    return out, P, branch


def _lookahead_index(plan: WaypointPlan, gains: PidGains) -> int:
    return min(gains.lookahead, len(plan.local)) - 1


def pid_control(plan: WaypointPlan, state: AgentState, pid: PidState, gains: PidGains = PidGains(),
                bounds: ActionBounds = ActionBounds(), dt: float = 0.1):
    """Track the plan: bearing to the lookahead waypoint drives steering,
    the speed implied by the first waypoint's distance drives acceleration."""
    if len(plan.points) == 0:
        raise ValueError("empty waypoint plan")
    q = state.as_array()
    c, s = math.cos(q[3]), math.sin(q[3])
    rel = plan.points - q[:2]
    local = np.stack([c * rel[:, 0] + s * rel[:, 1], -s * rel[:, 0] + c * rel[:, 1]], axis=-1)
    out, _, _ = _pid_law(local[_lookahead_index(plan, gains)], local[0], q[2], pid, gains, bounds, dt,
                         plan.waypoint_dt)
    return Action(out[0], out[1]), PidState(out[2], out[3], out[4], out[5], True)


# ---------------------------------------------------------------------------
# full ego policies


class EgoPolicy(Protocol):
    reactive: bool

    def initial_state(self): ...

    def act(self, scene: Scene, ctrl, need_jac: bool = False): ...


@dataclass
class PlanningEgo:
    """Planner + PID ego, differentiable end to end."""

    planner: PurePursuitPlanner = field(default_factory=PurePursuitPlanner)
    gains: PidGains = field(default_factory=PidGains)
    bounds: ActionBounds = field(default_factory=ActionBounds)

    @property
    def reactive(self) -> bool:
        return bool(getattr(self.planner, "reactive", False))

    def initial_state(self) -> PidState:
        return PidState()

    def act(self, scene: Scene, ctrl: PidState, need_jac: bool = False):
        """Returns (action (2,), new controller state, jacobian or None, branch)."""
        plan = self.planner.plan(scene, need_jac=need_jac)
        la = _lookahead_index(plan, self.gains)
        out, P, branch = _pid_law(plan.local[la], plan.local[0], scene.ego[2], ctrl, self.gains, self.bounds,
                                  scene.dt, plan.waypoint_dt)
        new = PidState(out[2], out[3], out[4], out[5], True)
        jac = None
        if need_jac:
            if plan.jac is None:
                raise ValueError("planner does not provide waypoint Jacobians")
            dim = plan.jac.shape[-1]
            dz = np.zeros((9, dim))
            dz[0:2] = plan.jac[la]
            dz[2:4] = plan.jac[0]
            dz[4, 2] = 1.0
            for r in range(N_CTRL):
                dz[5 + r, 4 + r] = 1.0
            jac = P @ dz
        return out[:2].copy(), new, jac, (plan.branch, branch)


@dataclass
class ReplayEgo:
    """Open-loop ego that replays a fixed action series."""

    actions: np.ndarray
    reactive = False

    def initial_state(self):
        return PidState()

    def act(self, scene: Scene, ctrl, need_jac: bool = False):
        a = np.asarray(self.actions[scene.step], float).copy()
        jac = np.zeros((N_OUT, N_Z_EGO + 4 * len(scene.others))) if need_jac else None
        return a, ctrl, jac, ()


def default_ego_policy() -> PlanningEgo:
    return PlanningEgo()
