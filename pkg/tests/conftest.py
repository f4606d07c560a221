import numpy as np
import pytest

from advscene.scenario import AgentMetadata, RoadPolyline, Scenario


def make_scenario(trajs, dt=0.1, target=None, sizes=None, road=(), actions=None):
    """Scenario from a list of (T, 4) arrays, ego first; 4.5 x 2 cars by default."""
    trajs = np.asarray(trajs, float)
    sizes = sizes or [(4.5, 2.0)] * len(trajs)
    agents = [AgentMetadata(l, w, 0.3 * l, 0.3 * l, is_ego=(i == 0)) for i, (l, w) in enumerate(sizes)]
    if target is None:
        target = trajs[0, -1, :2]
    return Scenario(agents=agents, trajectories=trajs, dt=dt, target_point=target, road_graph=road,
                    actions=actions)


def straight(x0, y0, speed, yaw, T, dt=0.1):
    t = np.arange(T) * dt
    return np.stack([x0 + speed * t * np.cos(yaw), y0 + speed * t * np.sin(yaw),
                     np.full(T, float(speed)), np.full(T, float(yaw))], axis=-1)


def corridor(x0, x1, half_width):
    return (RoadPolyline("boundary", [(x0, -half_width), (x1, -half_width)]),
            RoadPolyline("boundary", [(x0, half_width), (x1, half_width)]))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one summary line per acceptance criterion, printed after the run
ACCEPTANCE_LINES = []


def record_acceptance(label, ok, detail):
    ACCEPTANCE_LINES.append(f"[{'PASS' if ok else 'FAIL'}] {label}: {detail}")
    print(ACCEPTANCE_LINES[-1])


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
