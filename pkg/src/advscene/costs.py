"""Collision-induction and regularization costs.

Every cost takes the rolled-out trajectory array (N, T, 4) and, when asked,
returns its gradient with respect to that array so the gradient engine can
chain it back to the actions.  Only position and yaw receive gradient.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import shapely
from scipy.ndimage import gaussian_filter
from shapely.geometry import Polygon
from shapely.ops import unary_union

from .geometry import box_corners, box_distance_batch, corner_grad_to_state

DEFAULT_TAU = 2.0
DEFAULT_SIGMA = 1.0
DEFAULT_RESOLUTION = 0.25


class CostConfigError(ValueError):
    pass


class MapConstructionError(ValueError):
    pass


def _dims(metas):
    """Accept AgentMetadata sequences or an explicit (lengths, widths) pair."""
    if isinstance(metas, tuple) and len(metas) == 2 and isinstance(metas[0], np.ndarray):
        return metas
    return (np.array([m.length for m in metas], float), np.array([m.width for m in metas], float))


def _state_grad(g_corners, traj, lengths, widths):
    # (A, T, 4, 2) corner gradient -> (A, T, 4) state gradient
    gx, gy, gpsi = corner_grad_to_state(g_corners, traj[..., 3], lengths[:, None], widths[:, None])
    out = np.zeros(traj.shape)
    out[..., 0], out[..., 1], out[..., 3] = gx, gy, gpsi
    return out


def _corners(traj, lengths, widths):
    return box_corners(traj[..., 0], traj[..., 1], traj[..., 3], lengths[:, None], widths[:, None])


# ---------------------------------------------------------------------------
# ego collision induction


def ego_distance_table(trajectories, metas, candidates, with_grad=False):
    """Box distances between the ego and each candidate at every step, (m, T)."""
    traj = np.asarray(trajectories, float)
    lengths, widths = _dims(metas)
    cand = np.asarray(sorted(candidates), int)
    T = traj.shape[1]
    sub = traj[np.concatenate([[0], cand])]
    corners = _corners(sub, lengths[np.concatenate([[0], cand])], widths[np.concatenate([[0], cand])])
    m = len(cand)
    ego = np.broadcast_to(corners[0], (m, T, 4, 2)).reshape(-1, 4, 2)
    res = box_distance_batch(ego, corners[1:].reshape(-1, 4, 2), with_grad=with_grad)
    return (cand,) + tuple(r.reshape((m, T) + r.shape[1:]) for r in res)


def ego_collision_cost(trajectories, metas, candidates, with_grad=False):
    """Smallest time-averaged ego distance over the candidate set.

    Returns ``(cost, chosen)`` or ``(cost, chosen, grad, branches)``.  The
    gradient flows only through the attaining agent; ties pick the lowest
    index.
    """
    if len(candidates) == 0:
        raise CostConfigError("ego collision cost needs a non-empty candidate set")
    if min(candidates) < 1:
        raise CostConfigError("candidate indices must be background agents (>= 1)")
    traj = np.asarray(trajectories, float)
    T = traj.shape[1]
    out = ego_distance_table(traj, metas, candidates, with_grad=with_grad)
    cand, dist, branch = out[0], out[1], out[2]
    means = dist.mean(axis=1)
    j = int(np.argmin(means))
    cost, chosen = float(means[j]), int(cand[j])
    if not with_grad:
        return cost, chosen
    lengths, widths = _dims(metas)
    ga, gb = out[3][j] / T, out[4][j] / T
    grad = np.zeros(traj.shape)
    idx = np.array([0, chosen])
    grad[idx] = _state_grad(np.stack([ga, gb]), traj[idx], lengths[idx], widths[idx])
    return cost, chosen, grad, (j, branch[j])


# ---------------------------------------------------------------------------
# background-agent repulsion


def _pairs(n_agents):
    i, j = np.triu_indices(n_agents - 1, k=1)
    return i + 1, j + 1


def adv_collision_cost(trajectories, metas, tau: float = DEFAULT_TAU, with_grad=False):
    """Negated closest background-pair distance over all steps, capped at ``tau``.

    Value lies in [-tau, 0]; returns 0 with fewer than two background agents.
    """
    traj = np.asarray(trajectories, float)
    lengths, widths = _dims(metas)
    N, T = traj.shape[:2]
    if N - 1 < 2:
        return (0.0, np.zeros(traj.shape), ()) if with_grad else 0.0
    corners = _corners(traj, lengths, widths)
    pi, pj = _pairs(N)
    P = len(pi)
    res = box_distance_batch(corners[pi].reshape(-1, 4, 2), corners[pj].reshape(-1, 4, 2), with_grad=with_grad)
    dist = res[0].reshape(P, T)
    flat = int(np.argmin(dist))
    dmin = float(dist.flat[flat])
    cost = -min(tau, dmin)
    if not with_grad:
        return cost
    grad = np.zeros(traj.shape)
    p, k = divmod(flat, T)
    active = dmin < tau
    if active:
        ga = -res[2].reshape(P, T, 4, 2)[p, k]
        gb = -res[3].reshape(P, T, 4, 2)[p, k]
        for agent, g in ((pi[p], ga), (pj[p], gb)):
            sg = _state_grad(g[None, None], traj[agent:agent + 1, k:k + 1], lengths[agent:agent + 1],
                             widths[agent:agent + 1])
            grad[agent, k] += sg[0, 0]
    return cost, grad, (flat, active, int(res[1][flat]) if active else None)


# ---------------------------------------------------------------------------
# drivable area


@dataclass(frozen=True, eq=False)
class DrivableMap:
    """Binary out-of-bounds raster and its Gaussian-blurred version.

    Cell (r, c) covers x in [ox + c*res, ox + (c+1)*res) and likewise for y
    with rows; values are 1 outside the drivable region.
    """

    origin: np.ndarray
    resolution: float
    grid: np.ndarray
    blurred: np.ndarray
    kernel_sigma: float

    @property
    def shape(self):
        return self.grid.shape

    def cell_centers(self):
        H, W = self.grid.shape
        xs = self.origin[0] + (np.arange(W) + 0.5) * self.resolution
        ys = self.origin[1] + (np.arange(H) + 0.5) * self.resolution
        return xs, ys

    def sample(self, points, with_grad=False, field_name="blurred"):
        return bilinear_sample(self, points, with_grad=with_grad, field_name=field_name)

    def oob_at(self, points):
        """Nearest-cell binary lookup; outside the raster counts as out of bounds."""
        p = np.asarray(points, float)
        c = np.floor((p[..., 0] - self.origin[0]) / self.resolution).astype(int)
        r = np.floor((p[..., 1] - self.origin[1]) / self.resolution).astype(int)
        H, W = self.grid.shape
        inside = (c >= 0) & (c < W) & (r >= 0) & (r < H)
        out = np.ones(p.shape[:-1])
        out[inside] = self.grid[r[inside], c[inside]]
        return out


def _boundary_polygons(road_graph):
    boundaries = [(i, r.as_array()) for i, r in enumerate(road_graph) if r.kind == "boundary"]
    if not boundaries:
        raise MapConstructionError("road graph has no boundary polylines")
    polys, open_ = [], []
    for i, pts in boundaries:
        if len(pts) >= 4 and np.allclose(pts[0], pts[-1], atol=1e-6):
            polys.append((i, Polygon(pts)))
        else:
            open_.append((i, pts))
    if len(open_) % 2:
        raise MapConstructionError(
            f"unpaired open boundary polylines: {[i for i, _ in open_]}; "
            "boundaries must be closed rings or come in left/right pairs")
    for (i, left), (j, right) in zip(open_[::2], open_[1::2]):
        poly = Polygon(np.vstack([left, right[::-1]]))
        if not poly.is_valid:
            poly = Polygon(np.vstack([left, right]))
        if not poly.is_valid or poly.area <= 0:
            raise MapConstructionError(f"boundary polylines {i} and {j} do not enclose a region")
        polys.append((i, poly))
    bad = [i for i, p in polys if not p.is_valid or p.area <= 0]
    if bad:
        raise MapConstructionError(f"boundary polylines {bad} do not form valid rings")
    return [p for _, p in polys]


def drivable_region(road_graph):
    """Union of the regions enclosed by the road graph's boundaries (shapely geometry)."""
    return unary_union(_boundary_polygons(road_graph))


def build_drivable_map(road_graph, resolution: float = DEFAULT_RESOLUTION, sigma: float = DEFAULT_SIGMA,
                       margin: Optional[float] = None) -> DrivableMap:
    """Rasterize the region enclosed by boundary polylines and blur it.

    Closed boundary rings each enclose a drivable region; open boundaries are
    taken in consecutive left/right pairs.  The blur is a normalized Gaussian
    of standard deviation ``sigma`` meters truncated at 3 sigma, with the
    outside of the raster treated as out of bounds.
    """
    if not resolution > 0 or not sigma > 0:
        raise MapConstructionError("resolution and sigma must be positive")
    region = drivable_region(road_graph)
    if margin is None:
        margin = 3.0 * sigma + 2.0
    x0, y0, x1, y1 = region.bounds
    ox = np.floor((x0 - margin) / resolution) * resolution
    oy = np.floor((y0 - margin) / resolution) * resolution
    W = int(np.ceil((x1 + margin - ox) / resolution))
    H = int(np.ceil((y1 + margin - oy) / resolution))
    xs = ox + (np.arange(W) + 0.5) * resolution
    ys = oy + (np.arange(H) + 0.5) * resolution
    gx, gy = np.meshgrid(xs, ys)
    inside = shapely.contains_xy(region, gx, gy)
    grid = np.where(inside, 0.0, 1.0)
    blurred = gaussian_filter(grid, sigma / resolution, mode="constant", cval=1.0, truncate=3.0)
    blurred = np.clip(blurred, 0.0, 1.0)
    for a in (grid, blurred):
        a.setflags(write=False)
    return DrivableMap(np.array([ox, oy]), float(resolution), grid, blurred, float(sigma))


def bilinear_sample(m: DrivableMap, points, with_grad=False, field_name="blurred"):
    """Bilinear interpolation between cell centers; outside reads 1.0."""
    values = getattr(m, field_name)
    p = np.asarray(points, float)
    fx = (p[..., 0] - m.origin[0]) / m.resolution - 0.5
    fy = (p[..., 1] - m.origin[1]) / m.resolution - 0.5
    c0 = np.floor(fx).astype(int)
    r0 = np.floor(fy).astype(int)
    H, W = values.shape
    inside = (c0 >= 0) & (c0 < W - 1) & (r0 >= 0) & (r0 < H - 1)
    cc = np.where(inside, c0, 0)
    rr = np.where(inside, r0, 0)
    tx, ty = fx - c0, fy - r0
    v00 = values[rr, cc]
    v01 = values[rr, cc + 1]
    v10 = values[rr + 1, cc]
    v11 = values[rr + 1, cc + 1]
    val = (1 - tx) * (1 - ty) * v00 + tx * (1 - ty) * v01 + (1 - tx) * ty * v10 + tx * ty * v11
    val = np.where(inside, val, 1.0)
    if not with_grad:
        return val
    gx = ((1 - ty) * (v01 - v00) + ty * (v11 - v10)) / m.resolution
    gy = ((1 - tx) * (v10 - v00) + tx * (v11 - v01)) / m.resolution
    grad = np.stack([np.where(inside, gx, 0.0), np.where(inside, gy, 0.0)], axis=-1)
    cells = np.where(inside, r0 * W + c0, -1)
    return val, grad, cells


def deviation_cost(trajectories, metas, drivable: Optional[DrivableMap], with_grad=False):
    """Time-averaged sum of blurred out-of-bounds values at background corners."""
    traj = np.asarray(trajectories, float)
    T = traj.shape[1]
    if drivable is None or traj.shape[0] < 2:
        return (0.0, np.zeros(traj.shape), ()) if with_grad else 0.0
    lengths, widths = _dims(metas)
    bg = traj[1:]
    corners = _corners(bg, lengths[1:], widths[1:])
    if not with_grad:
        return float(bilinear_sample(drivable, corners).sum() / T)
    val, g, cells = bilinear_sample(drivable, corners, with_grad=True)
    grad = np.zeros(traj.shape)
    grad[1:] = _state_grad(g / T, bg, lengths[1:], widths[1:])
    return float(val.sum() / T), grad, cells


def write_pgm(values, path) -> None:
    """Grayscale P5 dump, one byte per cell, top row = largest y."""
    img = np.round(np.clip(np.asarray(values, float), 0, 1) * 255).astype(np.uint8)[::-1]
    H, W = img.shape
    Path(path).write_bytes(f"P5\n{W} {H}\n255\n".encode() + img.tobytes())


# ---------------------------------------------------------------------------
# total


@dataclass(frozen=True)
class CostWeights:
    adv: float = 1.0
    dev: float = 1.0
    tau: float = DEFAULT_TAU


@dataclass
class CostBreakdown:
    ego_collision: float
    adv_collision: float
    deviation: float
    total: float
    weights: CostWeights
    chosen_adversary: int
    grad: Optional[np.ndarray] = field(default=None, repr=False)
    branches: tuple = field(default=(), repr=False)


def total_cost(trajectories, metas, candidates: Sequence[int], weights: CostWeights = CostWeights(),
               drivable: Optional[DrivableMap] = None, with_grad=False) -> CostBreakdown:
    """Weighted sum ego + w_adv * repulsion + w_dev * deviation."""
    if with_grad:
        ego, chosen, g_ego, b_ego = ego_collision_cost(trajectories, metas, candidates, with_grad=True)
        adv, g_adv, b_adv = adv_collision_cost(trajectories, metas, weights.tau, with_grad=True)
        dev, g_dev, b_dev = deviation_cost(trajectories, metas, drivable, with_grad=True)
        grad = g_ego + weights.adv * g_adv + weights.dev * g_dev
        branches = (chosen, b_ego, b_adv, b_dev)
    else:
        ego, chosen = ego_collision_cost(trajectories, metas, candidates)
        adv = adv_collision_cost(trajectories, metas, weights.tau)
        dev = deviation_cost(trajectories, metas, drivable)
        grad, branches = None, ()
    total = ego + weights.adv * adv + weights.dev * dev
    return CostBreakdown(ego, adv, dev, total, weights, chosen, grad, branches)
