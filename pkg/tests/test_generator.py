import math

import numpy as np
import pytest

from advscene.generator import (KING, REGENTS, Adam, ConfigError, GeneratorConfig, InputNotCollisionFree,
                                NoCandidates, candidate_adversaries, generate, in_orange_zone, in_red_zone,
                                is_static, steering_mask, steering_total_variation)
from advscene.kinematics import with_estimated_actions
from advscene.scenario import AgentState, first_collision
from advscene.synth import SynthParams, canonical_scenario, synth_scenario

from conftest import make_scenario, straight


def test_static_examples():
    assert is_static(straight(3, 4, 0.0, 0, 50))
    assert not is_static(straight(0, 0, 10.0, 0, 50))
    # 0.05 m/s for 49 steps of 0.1 s covers 0.245 m
    assert is_static(straight(0, 0, 0.05, 0, 50), threshold=1.0)


def test_orange_zone_examples():
    ego = AgentState((0, 0), 5, 0)
    assert in_orange_zone(ego, AgentState((-10, 0), 5, 0))
    assert not in_orange_zone(ego, AgentState((10, 0), 5, 0))
    assert not in_orange_zone(ego, AgentState((0, 0), 5, 0))
    assert not in_orange_zone(ego, AgentState((-10, 10), 5, 0))


def _at_bearing(bearing, r=10.0):
    return (r * math.cos(bearing), r * math.sin(bearing))


def test_red_zone_examples():
    ego = AgentState((0, 0), 5, 0)
    assert in_red_zone(ego, AgentState(_at_bearing(math.pi / 32), 5, math.pi / 16))
    assert not in_red_zone(ego, AgentState((10, 0), 5, math.pi / 16))
    assert not in_red_zone(ego, AgentState(_at_bearing(math.pi / 32), 5, -math.pi / 16))
    # bearing outside the yaw offset
    assert not in_red_zone(ego, AgentState(_at_bearing(math.pi / 16), 5, math.pi / 32))
    assert not in_red_zone(ego, AgentState((0, 0), 5, math.pi / 16))
    assert in_red_zone(ego, AgentState(_at_bearing(-math.pi / 32), 5, -math.pi / 16))


def test_zone_rotation_invariance(rng):
    for _ in range(200):
        ego = np.array([rng.normal(), rng.normal(), 5, rng.uniform(-math.pi, math.pi)])
        b = ego[3] + rng.uniform(-math.pi, math.pi)
        r = rng.uniform(1, 20)
        adv = np.array([ego[0] + r * math.cos(b), ego[1] + r * math.sin(b), 5, ego[3] + rng.uniform(-0.5, 0.5)])
        th, t = rng.uniform(-math.pi, math.pi), rng.uniform(-100, 100, 2)
        c, s = math.cos(th), math.sin(th)

        def move(q):
            return np.array([c * q[0] - s * q[1] + t[0], s * q[0] + c * q[1] + t[1], q[2], q[3] + th])
        assert in_red_zone(ego, adv) == in_red_zone(move(ego), move(adv))
        assert in_orange_zone(ego, adv) == in_orange_zone(move(ego), move(adv))


def test_candidates_drop_static_agent():
    T = 30
    s = make_scenario([straight(0, 0, 5, 0, T), straight(20, 5, 0, 0, T), straight(20, 0, 5, 0, T)])
    assert candidate_adversaries(s, GeneratorConfig(mode=REGENTS)) == (2,)
    assert candidate_adversaries(s, GeneratorConfig(mode=KING)) == (1, 2)


def test_lone_rear_agent_has_no_candidates():
    T = 30
    s = make_scenario([straight(0, 0, 5, 0, T), straight(-12, 0, 5, 0, T)])
    with pytest.raises(NoCandidates):
        candidate_adversaries(s, GeneratorConfig(mode=REGENTS))
    with pytest.raises(NoCandidates):
        generate(s, config=GeneratorConfig(mode=REGENTS))


def test_candidates_match_predicate_scan(rng):
    T = 30
    for _ in range(10):
        trajs = [straight(0, 0, 5, 0, T)]
        for _ in range(5):
            speed = rng.choice([0.0, 5.0])
            trajs.append(straight(rng.uniform(-40, 40), rng.uniform(-8, 8), speed, rng.uniform(-0.2, 0.2), T))
        s = make_scenario(trajs)
        cfg = GeneratorConfig(mode=REGENTS)
        expect = []
        for i in range(1, 6):
            tr = s.trajectories
            frac = np.mean([in_orange_zone(tr[0, k], tr[i, k], cfg.orange_half_angle) for k in range(T)])
            if not is_static(tr[i]) and frac < cfg.tau_rear:
                expect.append(i)
        if expect:
            assert candidate_adversaries(s, cfg) == tuple(expect)
        else:
            with pytest.raises(NoCandidates):
                candidate_adversaries(s, cfg)


def test_steering_mask_fractions():
    T = 10
    ego = straight(0, 0, 5, 0, T)
    b, y = math.pi / 32, math.pi / 16
    red = np.tile([10 * math.cos(b), 10 * math.sin(b), 5, y], (T, 1))
    clear = np.tile([10, 0, 5, 0], (T, 1))
    mixed = np.vstack([red[:6], clear[:4]])  # 60% of steps in the red zone
    traj = np.stack([ego, red, clear, mixed])
    assert steering_mask(traj, GeneratorConfig(tau_front=0.5)).tolist() == [True, False, True]
    assert steering_mask(traj, GeneratorConfig(tau_front=0.7)).tolist() == [True, False, False]
    assert steering_mask(traj, GeneratorConfig(), candidates=[2, 3]).tolist() == [False, False, True]


def test_adam_matches_hand_computation():
    opt = Adam(0.1)
    p = opt.step(np.array([1.0, 2.0]), np.array([0.5, -1.0]))
    assert p == pytest.approx([0.9, 2.1], abs=1e-7)
    p = opt.step(p, np.array([0.25, 1.0]))
    # t=2: m = 0.9 m1 + 0.1 g, v = 0.999 v1 + 0.001 g^2, bias-corrected
    assert p == pytest.approx([0.9 - 0.1 * 0.3684211 / 0.3952250, 2.1 - 0.1 * 0.0526316], abs=1e-6)


def test_adam_frozen_entries_keep_value_and_moments():
    opt = Adam(0.1)
    p = opt.step(np.array([1.0, 2.0]), np.array([0.5, -1.0]), update=np.array([True, False]))
    assert p[1] == 2.0 and opt.m[1] == 0.0 and opt.v[1] == 0.0


def test_already_colliding_input_rejected():
    T = 10
    s = make_scenario([straight(0, 0, 5, 0, T), straight(2, 0, 5, 0, T)])
    with pytest.raises(InputNotCollisionFree):
        generate(s)


def test_static_only_scenario_rejected():
    T = 20
    s = make_scenario([straight(0, 0, 5, 0, T), straight(30, 5, 0, 0, T)])
    with pytest.raises(NoCandidates):
        generate(s, config=GeneratorConfig(mode=REGENTS))


def test_config_validation_and_round_trip():
    with pytest.raises(ConfigError):
        GeneratorConfig(mode="fast")
    with pytest.raises(ConfigError):
        GeneratorConfig(tau_front=0.0)
    with pytest.raises(ConfigError):
        GeneratorConfig.from_dict({"learning_rat": 1e-3})
    cfg = GeneratorConfig(mode=KING, max_iters=7)
    assert GeneratorConfig.from_dict(cfg.to_dict()) == cfg


def test_steering_total_variation():
    acts = np.zeros((2, 4, 2))
    acts[1, :, 1] = [0.0, 0.1, -0.1, 0.0]
    assert steering_total_variation(acts, 2) == pytest.approx(0.4)
    assert steering_total_variation(acts, 1) == 0.0


@pytest.fixture(scope="module")
def canonical_runs():
    s = canonical_scenario()
    return s, {m: generate(s, config=GeneratorConfig(mode=m)) for m in (KING, REGENTS)}


def test_success_reproduces_collision(canonical_runs):
    s, runs = canonical_runs
    for r in runs.values():
        assert r.success
        replay = r.final_scenario
        from advscene.ego import default_ego_policy
        from advscene.grad import simulate
        traj, _ = simulate(replay, default_ego_policy(), replay.actions, record=False)
        assert first_collision(replay.replace(trajectories=traj)) == r.collision


def test_masked_steering_is_frozen(canonical_runs):
    s, runs = canonical_runs
    r = runs[REGENTS]
    start = with_estimated_actions(s).actions
    assert all(1 in m for m in r.masked_per_iteration)
    assert np.array_equal(r.final_scenario.actions[0, :, 1], start[0, :, 1])
    assert not np.array_equal(r.final_scenario.actions[0, :, 0], start[0, :, 0])
    assert steering_total_variation(r.final_scenario.actions, 1) < runs[KING].steering_tv()


def test_cost_trace_mostly_non_increasing(canonical_runs):
    _, runs = canonical_runs
    for r in runs.values():
        totals = [row.total for row in r.cost_trace]
        steps = list(zip(totals, totals[1:]))
        assert sum(b <= a for a, b in steps) >= 0.8 * len(steps)


def test_generation_is_deterministic(canonical_runs):
    s, runs = canonical_runs
    again = generate(s, config=GeneratorConfig(mode=REGENTS))
    first = runs[REGENTS]
    assert again.to_dict() == first.to_dict()
    assert again.trace_csv() == first.trace_csv()
    assert again.final_scenario.actions.tobytes() == first.final_scenario.actions.tobytes()


def test_non_candidates_keep_their_actions():
    s = synth_scenario("straight_follow", SynthParams(horizon=40, ego_speed=3.0, adv_speed=3.0, gap=15.0,
                                                      n_background=2, extras=("parked",), seed=2))
    r = generate(s, config=GeneratorConfig(mode=REGENTS, max_iters=15))
    assert r.candidates == (1,)
    start = with_estimated_actions(s).actions
    assert r.final_scenario.actions[1].tobytes() == start[1].tobytes()
    assert r.final_scenario.actions[0].tobytes() != start[0].tobytes()
    assert r.iterations_used == len(r.cost_trace)


def test_zero_iterations_is_a_plain_evaluation():
    s = canonical_scenario()
    r = generate(s, config=GeneratorConfig(max_iters=0))
    assert not r.success and r.iterations_used == 0 and r.cost_trace == []
