"""Built-in oracle checks run by ``advscene selftest``.

* geometry: separating-axis overlap against dense point containment, and
  box distance against a brute-force minimum over sampled boundary points;
* gradients: adjoint gradients against central finite differences on
  random closed-loop scenes, restricted to coordinates whose stencil does
  not cross a branch of the rollout or the cost.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .costs import build_drivable_map
from .ego import BrakingPlanner, PlanningEgo, PurePursuitPlanner
from .geometry import box_corners, box_distance, boxes_overlap
from .grad import TotalCost, backward, finite_diff_grad, simulate
from .kinematics import with_estimated_actions
from .synth import random_scenario


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail} ({self.seconds:.1f}s)"


def random_box(rng):
    return box_corners(rng.uniform(-4, 4), rng.uniform(-4, 4), rng.uniform(-math.pi, math.pi),
                       rng.uniform(0.5, 5.0), rng.uniform(0.3, 3.0))


def boundary_samples(c, per_edge):
    t = np.linspace(0.0, 1.0, per_edge, endpoint=False)[:, None]
    return np.concatenate([c[i] + t * (c[(i + 1) % 4] - c[i]) for i in range(4)])


def _contains(c, pts, tol=1e-12):
    """Points inside or on a convex CCW polygon."""
    inside = np.ones(len(pts), bool)
    for i in range(4):
        e = c[(i + 1) % 4] - c[i]
        r = pts - c[i]
        inside &= e[0] * r[:, 1] - e[1] * r[:, 0] >= -tol
    return inside


def overlap_oracle(a, b, per_edge=400, grid=40):
    """Dense containment: any boundary or interior sample of one box inside the other."""
    def samples(c):
        u = np.linspace(0.0, 1.0, grid)
        uu, vv = np.meshgrid(u, u)
        inner = c[0] + uu.reshape(-1, 1) * (c[1] - c[0]) + vv.reshape(-1, 1) * (c[3] - c[0])
        return np.vstack([boundary_samples(c, per_edge), inner])
    return bool(_contains(b, samples(a)).any() or _contains(a, samples(b)).any())


def distance_oracle(a, b, n_points=10_000):
    pa = boundary_samples(a, n_points // 4)
    pb = boundary_samples(b, n_points // 4)
    d, _ = cKDTree(pb, balanced_tree=False, compact_nodes=False).query(pa)
    return float(d.min())


def check_geometry(n_pairs=1000, seed=0) -> CheckResult:
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    flips, worst = 0, 0.0
    for _ in range(n_pairs):
        a, b = random_box(rng), random_box(rng)
        ov = boxes_overlap(a, b)
        flips += ov != overlap_oracle(a, b)
        d = box_distance(a, b)
        ref = 0.0 if ov else distance_oracle(a, b)
        worst = max(worst, abs(d - ref))
    ok = flips == 0 and worst <= 1e-3
    return CheckResult("geometry oracle", ok, f"{n_pairs} pairs, {flips} overlap disagreements, "
                       f"max distance error {worst:.2e}", time.perf_counter() - t0)


def gradient_case(rng, coords_per_case=16, h=1e-6, rtol=1e-4, atol=1e-7):
    """One random scene; returns (n_checked, n_unstable, n_bad, max_rel)."""
    T = int(rng.integers(10, 41))
    n = int(rng.integers(1, 5))
    s = with_estimated_actions(random_scenario(rng, T, n))
    planner = BrakingPlanner() if rng.random() < 0.5 else PurePursuitPlanner()
    policy = PlanningEgo(planner)
    m = build_drivable_map(s.road_graph)
    cost = TotalCost(s, range(1, n + 1), drivable=m)
    _, tape = simulate(s, policy, s.actions, drivable=m)
    _, g = backward(tape, cost)
    flat = rng.choice(s.actions.size, size=min(coords_per_case, s.actions.size), replace=False)
    coords = [np.unravel_index(j, s.actions.shape) for j in sorted(flat)]
    fd, stable = finite_diff_grad(s, policy, s.actions, cost, h=h, drivable=m, coords=coords,
                                  return_stability=True)
    checked = unstable = bad = 0
    max_rel = 0.0
    for idx in coords:
        if not stable[idx]:
            unstable += 1
            continue
        checked += 1
        err = abs(g[idx] - fd[idx])
        if err > atol + rtol * abs(fd[idx]):
            bad += 1
        max_rel = max(max_rel, err / max(abs(fd[idx]), 1e-12))
    return checked, unstable, bad, max_rel


def check_gradients(n_cases=50, seed=0, coords_per_case=16) -> CheckResult:
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    checked = unstable = bad = 0
    for _ in range(n_cases):
        c, u, b, _ = gradient_case(rng, coords_per_case)
        checked, unstable, bad = checked + c, unstable + u, bad + b
    frac = unstable / max(checked + unstable, 1)
    ok = bad == 0 and frac <= 0.05
    return CheckResult("gradient oracle", ok, f"{n_cases} scenes, {checked} coordinates checked, {bad} outside "
                       f"tolerance, {unstable} skipped at branch changes ({100 * frac:.1f}%)",
                       time.perf_counter() - t0)


def run(quick: bool = False) -> list:
    if quick:
        return [check_geometry(100), check_gradients(5)]
    return [check_geometry(), check_gradients()]
