import math

import numpy as np
import pytest
from scipy.stats import norm
from shapely.geometry import Polygon

from advscene.costs import (CostConfigError, CostWeights, MapConstructionError, adv_collision_cost,
                            build_drivable_map, deviation_cost, ego_collision_cost, total_cost, write_pgm)
from advscene.geometry import box_corners
from advscene.scenario import RoadPolyline
from advscene.synth import random_scenario

from conftest import make_scenario, straight


def rectangle(x0, y0, x1, y1):
    return (RoadPolyline("boundary", [(x0, y0), (x1, y0), (x1, y1), (x0, y1), (x0, y0)]),)


def _poly(state, length, width):
    return Polygon(box_corners(state[0], state[1], state[3], length, width))


def test_ego_cost_single_adversary_constant_gap():
    # 2 m wide boxes whose centers are 5 m apart laterally: 3 m gap
    s = make_scenario([straight(0, 0, 5, 0, 10), straight(0, 5, 5, 0, 10)])
    cost, chosen = ego_collision_cost(s.trajectories, s.agents, [1])
    assert cost == pytest.approx(3.0) and chosen == 1


def test_ego_cost_picks_nearer_on_average():
    s = make_scenario([straight(0, 0, 5, 0, 10), straight(0, 7, 5, 0, 10), straight(0, -5, 5, 0, 10)])
    cost, chosen = ego_collision_cost(s.trajectories, s.agents, [1, 2])
    assert cost == pytest.approx(3.0) and chosen == 2


def test_ego_cost_empty_candidates():
    s = make_scenario([straight(0, 0, 5, 0, 10), straight(0, 7, 5, 0, 10)])
    with pytest.raises(CostConfigError):
        ego_collision_cost(s.trajectories, s.agents, [])


def test_ego_cost_brute_force(rng):
    for _ in range(10):
        s = random_scenario(rng, 12, 3)
        tr = s.trajectories
        means = [np.mean([_poly(tr[0, k], s.agents[0].length, s.agents[0].width)
                          .distance(_poly(tr[i, k], s.agents[i].length, s.agents[i].width)) for k in range(12)])
                 for i in (1, 2, 3)]
        cost, chosen = ego_collision_cost(tr, s.agents, [1, 2, 3])
        assert cost == pytest.approx(min(means), abs=1e-9)
        assert chosen == 1 + int(np.argmin(means))


def test_adv_cost_cap_and_value():
    far = make_scenario([straight(0, 0, 5, 0, 5), straight(0, 10, 5, 0, 5), straight(0, 20, 5, 0, 5)])
    assert adv_collision_cost(far.trajectories, far.agents, tau=2.0) == -2.0
    near = make_scenario([straight(0, 0, 5, 0, 5), straight(0, 10, 5, 0, 5), straight(0, 13, 5, 0, 5)])
    assert adv_collision_cost(near.trajectories, near.agents, tau=2.0) == pytest.approx(-1.0)
    lone = make_scenario([straight(0, 0, 5, 0, 5), straight(0, 10, 5, 0, 5)])
    assert adv_collision_cost(lone.trajectories, lone.agents) == 0.0


def test_adv_cost_brute_force(rng):
    for _ in range(10):
        s = random_scenario(rng, 10, 4)
        tr = s.trajectories
        d = min(_poly(tr[i, k], s.agents[i].length, s.agents[i].width)
                .distance(_poly(tr[j, k], s.agents[j].length, s.agents[j].width))
                for k in range(10) for i in range(1, 5) for j in range(i + 1, 5))
        assert adv_collision_cost(tr, s.agents, tau=50.0) == pytest.approx(-d, abs=1e-9)


def test_rectangle_map_values():
    m = build_drivable_map(rectangle(0, 0, 100, 10), resolution=0.5, sigma=1.0)
    xs, ys = m.cell_centers()
    X, Y = np.meshgrid(xs, ys)
    inside = (X > 0) & (X < 100) & (Y > 0) & (Y < 10)
    assert np.array_equal(m.grid, np.where(inside, 0.0, 1.0))
    assert m.sample([50.0, 5.0]) == pytest.approx(0.0, abs=1e-12)
    assert m.sample([500.0, 5.0]) == 1.0


def test_blur_matches_gaussian_cdf_across_edge():
    m = build_drivable_map(rectangle(0, 0, 100, 10), resolution=0.5, sigma=1.0)
    ys = np.linspace(7.0, 13.0, 49)
    vals = m.sample(np.column_stack([np.full_like(ys, 50.0), ys]))
    ref = norm.cdf((ys - 10.0) / 1.0)
    assert np.abs(vals - ref).max() < 0.02


def test_deviation_examples():
    road = rectangle(-50, -10, 50, 10)
    inside = make_scenario([straight(-20, 0, 5, 0, 10), straight(0, 0, 5, 0, 10)], road=road)
    m = build_drivable_map(road)
    assert deviation_cost(inside.trajectories, inside.agents, m) == pytest.approx(0.0, abs=1e-12)
    outside = make_scenario([straight(-20, 0, 5, 0, 10), straight(0, 40, 5, 0, 10)], road=road)
    assert deviation_cost(outside.trajectories, outside.agents, m) == pytest.approx(4.0)


def _dense_blur_at(m, point):
    # direct truncated-Gaussian convolution of the binary grid (outside = 1),
    # evaluated at the four surrounding cell centers, then bilinear
    res, sig = m.resolution, m.kernel_sigma / m.resolution
    rad = int(3.0 * sig + 0.5)
    off = np.arange(-rad, rad + 1)
    w1 = np.exp(-0.5 * (off / sig) ** 2)
    w1 /= w1.sum()
    H, W = m.grid.shape

    def at(r, c):
        acc = 0.0
        for i, wi in zip(off, w1):
            for j, wj in zip(off, w1):
                rr, cc = r + i, c + j
                v = m.grid[rr, cc] if 0 <= rr < H and 0 <= cc < W else 1.0
                acc += wi * wj * v
        return acc

    fx = (point[0] - m.origin[0]) / res - 0.5
    fy = (point[1] - m.origin[1]) / res - 0.5
    c0, r0 = int(math.floor(fx)), int(math.floor(fy))
    tx, ty = fx - c0, fy - r0
    return ((1 - tx) * (1 - ty) * at(r0, c0) + tx * (1 - ty) * at(r0, c0 + 1)
            + (1 - tx) * ty * at(r0 + 1, c0) + tx * ty * at(r0 + 1, c0 + 1))


def test_deviation_straddling_matches_dense_convolution():
    road = rectangle(-30, -5, 30, 5)
    m = build_drivable_map(road, resolution=0.5, sigma=1.0)
    adv = straight(0, 4.6, 0.0, 0.3, 2)
    s = make_scenario([straight(-20, 0, 0, 0, 2), adv], road=road)
    corners = box_corners(adv[0, 0], adv[0, 1], adv[0, 3], 4.5, 2.0)
    ref = sum(_dense_blur_at(m, c) for c in corners)
    assert deviation_cost(s.trajectories, s.agents, m) == pytest.approx(ref, abs=1e-3)


def test_total_with_zero_weights_is_ego_term(rng):
    s = random_scenario(rng, 10, 3)
    m = build_drivable_map(s.road_graph)
    b = total_cost(s.trajectories, s.agents, [1, 2, 3], CostWeights(adv=0.0, dev=0.0), m)
    assert b.total == ego_collision_cost(s.trajectories, s.agents, [1, 2, 3])[0]


def test_total_recomputes_components(rng):
    s = random_scenario(rng, 10, 3)
    m = build_drivable_map(s.road_graph)
    w = CostWeights(adv=0.7, dev=1.3, tau=3.0)
    b = total_cost(s.trajectories, s.agents, [2, 3], w, m)
    ego = ego_collision_cost(s.trajectories, s.agents, [2, 3])[0]
    adv = adv_collision_cost(s.trajectories, s.agents, 3.0)
    dev = deviation_cost(s.trajectories, s.agents, m)
    assert (b.ego_collision, b.adv_collision, b.deviation) == (ego, adv, dev)
    assert b.total == pytest.approx(ego + 0.7 * adv + 1.3 * dev, abs=1e-12)


def test_single_adversary_has_no_repulsion_term():
    road = rectangle(-50, -10, 50, 10)
    s = make_scenario([straight(-20, 0, 5, 0, 10), straight(0, 0, 5, 0, 10)], road=road)
    b = total_cost(s.trajectories, s.agents, [1], CostWeights(), build_drivable_map(road))
    assert b.adv_collision == 0.0
    assert b.total == pytest.approx(b.ego_collision, abs=1e-12)


def _same(a, b):
    if isinstance(a, np.ndarray) or isinstance(b, np.ndarray):
        return np.array_equal(a, b)
    if isinstance(a, tuple) and isinstance(b, tuple):
        return len(a) == len(b) and all(_same(x, y) for x, y in zip(a, b))
    return a == b


def test_total_gradient_matches_finite_differences(rng):
    s = random_scenario(rng, 8, 3)
    m = build_drivable_map(s.road_graph)
    tr = np.array(s.trajectories)
    b = total_cost(tr, s.agents, [1, 2, 3], CostWeights(tau=50.0), m, with_grad=True)
    h = 1e-6
    checked = 0
    for _ in range(40):
        i, k, c = rng.integers(0, 4), rng.integers(0, 8), rng.choice([0, 1, 3])
        tp, tm = tr.copy(), tr.copy()
        tp[i, k, c] += h
        tm[i, k, c] -= h
        fp = total_cost(tp, s.agents, [1, 2, 3], CostWeights(tau=50.0), m, with_grad=True)
        fm = total_cost(tm, s.agents, [1, 2, 3], CostWeights(tau=50.0), m, with_grad=True)
        if not (_same(fp.branches, fm.branches) and _same(fp.branches, b.branches)):
            continue
        assert b.grad[i, k, c] == pytest.approx((fp.total - fm.total) / (2 * h), rel=1e-4, abs=1e-7)
        checked += 1
    assert checked >= 30


def test_unpaired_boundary_is_reported():
    road = (RoadPolyline("boundary", [(0, 0), (10, 0)]),)
    with pytest.raises(MapConstructionError, match=r"\[0\]"):
        build_drivable_map(road)
    with pytest.raises(MapConstructionError):
        build_drivable_map(())


def test_write_pgm(tmp_path):
    p = tmp_path / "m.pgm"
    write_pgm(np.array([[0.0, 1.0], [0.5, 0.0]]), p)
    data = p.read_bytes()
    assert data.startswith(b"P5\n2 2\n255\n")
    assert data[-4:] == bytes([128, 0, 0, 255])
