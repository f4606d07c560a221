import json

import pytest

from advscene.cli import main
from advscene.scenario import first_collision, load_scenario, save_scenario

from conftest import make_scenario, straight


@pytest.fixture(scope="module")
def suite_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("suite")
    assert main(["synth", "--count", "20", "--seed", "7", "--out", str(out)]) == 0
    return out


def test_synth_writes_collision_free_files(suite_dir):
    man = json.loads((suite_dir / "manifest.json").read_text())["scenarios"]
    assert len(man) == 20
    for e in man:
        assert first_collision(load_scenario(suite_dir / e["file"])) is None
    cfg = json.loads((suite_dir / "config.json").read_text())
    assert cfg["seed"] == 7 and cfg["count"] == 20


def test_synth_zero_count(tmp_path):
    assert main(["synth", "--count", "0", "--out", str(tmp_path)]) == 0
    assert json.loads((tmp_path / "manifest.json").read_text())["scenarios"] == []


def test_synth_single_template_with_params(tmp_path):
    assert main(["synth", "--template", "oncoming", "--count", "2", "--param", "oncoming_offset=5.0",
                 "--out", str(tmp_path)]) == 0
    s = load_scenario(tmp_path / "000_oncoming.json")
    assert s.trajectories[1, 0, 1] == pytest.approx(5.0)


def test_usage_errors(tmp_path):
    assert main(["synth", "--template", "zigzag", "--out", str(tmp_path)]) == 1
    assert main(["synth", "--out", str(tmp_path), "--bogus"]) == 1
    assert main([]) == 1
    assert main(["generate", str(tmp_path / "missing.json"), "--out", str(tmp_path)]) == 1
    bad = tmp_path / "cfg.json"
    bad.write_text(json.dumps({"nonsense": 1}))
    assert main(["generate", str(tmp_path), "--config", str(bad), "--out", str(tmp_path / "o")]) == 1


def test_validation_error_exit_code(tmp_path):
    assert main(["synth", "--template", "straight_follow", "--param", "gap=1.0", "--out", str(tmp_path)]) == 2
    assert main(["generate", str(tmp_path), "--tau-front", "2.0", "--out", str(tmp_path / "o")]) == 2


def test_generate_records_no_candidates(tmp_path):
    T = 20
    src = tmp_path / "in"
    src.mkdir()
    save_scenario(make_scenario([straight(0, 0, 5, 0, T), straight(30, 5, 0, 0, T)]), src / "static.json")
    before = (src / "static.json").read_bytes()
    out = tmp_path / "out"
    assert main(["generate", str(src / "static.json"), "--mode", "regents", "--out", str(out)]) == 0
    man = json.loads((out / "manifest.json").read_text())
    entry = man["scenarios"][0]
    assert entry["error"] == "NoCandidates" and entry["success"] is False
    assert man["generation_success_rate"] == 0.0
    assert (src / "static.json").read_bytes() == before


def test_generate_and_evaluate_round(tmp_path):
    src = tmp_path / "suite"
    assert main(["synth", "--count", "3", "--seed", "1", "--out", str(src)]) == 0
    before = {p.name: p.read_bytes() for p in src.iterdir()}
    gen = tmp_path / "gen"
    assert main(["generate", str(src), "--max-iters", "5", "--mode", "king", "--jobs", "2",
                 "--out", str(gen)]) == 0
    assert {p.name: p.read_bytes() for p in src.iterdir()} == before
    man = json.loads((gen / "manifest.json").read_text())
    src_man = json.loads((src / "manifest.json").read_text())["scenarios"]
    assert [e["name"] for e in man["scenarios"]] == [e["name"] for e in src_man]
    for e in man["scenarios"]:
        assert (gen / e["result"]).exists() and (gen / e["trace"]).exists()
        assert (gen / e["trace"]).read_text().startswith("iteration,ego_collision,adv_collision")
    ev = tmp_path / "eval"
    assert main(["evaluate", "--original", str(src), "--generated", str(gen), "--jobs", "1",
                 "--out", str(ev)]) == 0
    rows = json.loads((ev / "summary.json").read_text())["rows"]
    assert [r["label"] for r in rows] == ["original", "king"]
    assert rows[0]["collision_rate"] == 0.0
    assert len((ev / "generated.csv").read_text().splitlines()) == 4


def test_generate_output_independent_of_jobs(tmp_path):
    src = tmp_path / "suite"
    assert main(["synth", "--count", "2", "--seed", "3", "--out", str(src)]) == 0
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["generate", str(src), "--max-iters", "4", "--jobs", "1", "--out", str(a)]) == 0
    assert main(["generate", str(src), "--max-iters", "4", "--jobs", "2", "--out", str(b)]) == 0
    for p in sorted(a.iterdir()):
        assert p.read_bytes() == (b / p.name).read_bytes(), p.name


def test_render_command(tmp_path, suite_dir):
    out = tmp_path / "svg"
    T = load_scenario(suite_dir / "000_follow_follower.json").horizon
    assert main(["render", str(suite_dir / "000_follow_follower.json"), "--frame", "0", "--frame", "-1",
                 "--out", str(out)]) == 0
    assert sorted(p.name for p in out.iterdir()) == ["000_follow_follower.frame000.svg",
                                                    f"000_follow_follower.frame{T - 1:03d}.svg"]
    assert main(["render", str(suite_dir / "000_follow_follower.json"), "--frame", "999",
                 "--out", str(out)]) == 1


def test_selftest_quick(capsys):
    assert main(["selftest", "--quick"]) == 0
    out = capsys.readouterr().out
    assert out.count("[PASS]") == 2
