"""Command-line interface: synth | generate | evaluate | render | selftest.

Exit codes: 0 success, 1 usage error, 2 validation error, 3 runtime error.
Options may also come from a JSON file given with ``--config``; explicit
flags override the file.  Every command writes its effective configuration
to ``config.json`` in its output directory.
"""
from __future__ import annotations

import argparse
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path

from .costs import CostWeights, MapConstructionError
from .ego import BrakingPlanner, PidGains, PlanningEgo, PurePursuitPlanner
from .generator import ConfigError, GeneratorConfig, GeneratorError, generate, scenario_drivable
from .kinematics import ActionBounds
from .metrics import InfractionFactors, MetricError, evaluate_scenario, suite_evaluate
from .render import RenderError, RenderSpec, render_svg
from .scenario import ScenarioError, dumps_scenario, load_scenario
from .synth import TEMPLATES, SynthError, SynthParams, synth_scenario, synth_suite

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


# ---------------------------------------------------------------------------
# configuration


GEN_DEFAULTS = {
    "mode": "regents",
    "lr": 1e-3,
    "max_iters": 500,
    "tau_front": 0.5,
    "tau_rear": 0.5,
    "orange_half_angle_deg": 22.5,
    "ego_grad": "attach",
    "planner": "pure_pursuit",
    "seed": 0,
    "jobs": None,
    "weights": {},
    "bounds": {},
    "pid": {},
}


def _merged(args, defaults: dict) -> dict:
    """defaults < --config file < explicit flags."""
    cfg = dict(defaults)
    if getattr(args, "config", None):
        try:
            data = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise UsageError(f"cannot read config file {args.config}: {e}") from e
        if not isinstance(data, dict):
            raise UsageError("config file must hold a JSON object")
        unknown = sorted(set(data) - set(defaults))
        if unknown:
            raise UsageError(f"unknown config keys {unknown}")
        cfg.update(data)
    for key in defaults:
        v = getattr(args, key, None)
        if v is not None:
            cfg[key] = v
    return cfg


def generator_config(cfg: dict) -> GeneratorConfig:
    return GeneratorConfig(
        mode=cfg["mode"],
        learning_rate=float(cfg["lr"]),
        max_iters=int(cfg["max_iters"]),
        tau_front=float(cfg["tau_front"]),
        tau_rear=float(cfg["tau_rear"]),
        orange_half_angle=math.radians(float(cfg["orange_half_angle_deg"])),
        ego_grad=cfg["ego_grad"],
        weights=CostWeights(**cfg["weights"]),
        bounds=ActionBounds(**cfg["bounds"]),
    )


def ego_policy(cfg: dict) -> PlanningEgo:
    planners = {"pure_pursuit": PurePursuitPlanner, "braking": BrakingPlanner}
    if cfg["planner"] not in planners:
        raise UsageError(f"unknown planner {cfg['planner']!r}; choose from {sorted(planners)}")
    try:
        gains = PidGains(**cfg["pid"])
    except TypeError as e:
        raise ConfigError(f"bad PID gains: {e}") from e
    return PlanningEgo(planners[cfg["planner"]](), gains, ActionBounds(**cfg["bounds"]))


def _jobs(cfg) -> int:
    j = cfg.get("jobs")
    return max(1, int(j)) if j else (os.cpu_count() or 1)


# ---------------------------------------------------------------------------
# synth


def cmd_synth(args) -> int:
    cfg = _merged(args, {"template": "mixed", "count": 20, "seed": 7, "params": {}})
    out = Path(args.out)
    template, count, seed = cfg["template"], int(cfg["count"]), int(cfg["seed"])
    if template != "mixed" and template not in TEMPLATES:
        raise UsageError(f"unknown template {template!r}; choose from {('mixed',) + TEMPLATES}")
    if count < 0:
        raise UsageError("--count must be non-negative")
    params = dict(cfg["params"])
    for item in args.param or []:
        key, _, value = item.partition("=")
        params[key] = json.loads(value)
    if template == "mixed":
        if params:
            raise UsageError("--param applies to a single template, not to the mixed suite")
        entries = [(name, tpl, p, s) for name, tpl, p, s in synth_suite(count, seed)]
    else:
        entries = []
        for j in range(count):
            p = SynthParams.from_dict({**params, "seed": seed + j})
            entries.append((f"{j:03d}_{template}", template, p, synth_scenario(template, p)))
    manifest = []
    for name, tpl, p, s in entries:
        fname = f"{name}.json"
        _write(out / fname, dumps_scenario(s))
        manifest.append({"name": name, "file": fname, "template": tpl, "params": asdict(p)})
    cfg["params"] = params
    _write(out / "manifest.json", _dump({"scenarios": manifest}))
    _write(out / "config.json", _dump({"command": "synth", **cfg}))
    print(f"wrote {len(manifest)} scenarios to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# generate


def _inputs(paths) -> list:
    """Expand directories (via their manifest) and files into (name, path)."""
    items = []
    for raw in paths:
        p = Path(raw)
        if p.is_dir():
            man = p / "manifest.json"
            if man.exists():
                for e in json.loads(man.read_text())["scenarios"]:
                    items.append((e["name"], p / e["file"]))
            else:
                items += [(f.stem, f) for f in sorted(p.glob("*.json")) if f.name != "config.json"]
        elif p.is_file():
            items.append((p.stem, p))
        else:
            raise UsageError(f"input {raw} does not exist")
    names = [n for n, _ in items]
    if len(set(names)) != len(names):
        raise UsageError("duplicate scenario names among inputs")
    return items


def _generate_one(job):
    name, path, cfg = job
    entry = {"name": name, "source": str(path)}
    files = {}
    try:
        s = load_scenario(path)
        gc = generator_config(cfg)
        r = generate(s, ego_policy(cfg), gc)
    except (GeneratorError, ScenarioError, MapConstructionError) as e:
        entry.update(success=False, error=type(e).__name__, message=str(e))
        return entry, files
    entry.update(success=r.success, iterations_used=r.iterations_used, chosen_adversary=r.chosen_adversary,
                 rear_impact=r.rear_impact, error=None)
    files[f"{name}.result.json"] = _dump(r.to_dict())
    files[f"{name}.scenario.json"] = dumps_scenario(r.final_scenario)
    files[f"{name}.trace.csv"] = r.trace_csv()
    entry["result"] = f"{name}.result.json"
    entry["scenario"] = f"{name}.scenario.json"
    entry["trace"] = f"{name}.trace.csv"
    return entry, files


def run_batch(items, cfg, jobs: int) -> list:
    work = [(name, path, cfg) for name, path in items]
    if jobs <= 1 or len(work) <= 1:
        return [_generate_one(w) for w in work]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_generate_one, work))  # map keeps input order


def cmd_generate(args) -> int:
    cfg = _merged(args, GEN_DEFAULTS)
    generator_config(cfg)  # validate before doing any work
    ego_policy(cfg)
    items = _inputs(args.inputs)
    out = Path(args.out)
    results = run_batch(items, cfg, _jobs(cfg))
    manifest = []
    for entry, files in results:
        for fname, text in files.items():
            _write(out / fname, text)
        entry["source"] = Path(entry["source"]).name
        manifest.append(entry)
    eligible = [e for e in manifest if e["error"] != "InputNotCollisionFree"]
    rate = 100.0 * sum(e["success"] for e in eligible) / len(eligible) if eligible else None
    _write(out / "manifest.json", _dump({"scenarios": manifest, "generation_success_rate": rate}))
    cfg_echo = dict(cfg)
    cfg_echo.pop("jobs", None)  # parallelism does not change results
    _write(out / "config.json", _dump({"command": "generate", **cfg_echo}))
    ok = sum(e["success"] for e in manifest)
    print(f"{ok}/{len(manifest)} scenarios turned into collisions; success rate "
          f"{'n/a' if rate is None else f'{rate:.2f}%'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# evaluate


def _evaluate_one(job):
    name, path, cfg = job
    s = load_scenario(path)
    drivable = scenario_drivable(s)
    factors = InfractionFactors(**cfg["factors"])
    return evaluate_scenario(name, s, ego_policy(cfg), drivable, factors, int(cfg["min_off_steps"]))


def cmd_evaluate(args) -> int:
    defaults = dict(GEN_DEFAULTS, factors={}, min_off_steps=3)
    cfg = _merged(args, defaults)
    originals = _inputs([args.original])
    gen_dir = Path(args.generated)
    man_path = gen_dir / "manifest.json"
    if not man_path.exists():
        raise UsageError(f"{gen_dir} has no manifest.json from a generate run")
    gen_entries = {e["name"]: e for e in json.loads(man_path.read_text())["scenarios"]}
    names = [n for n, _ in originals]
    if sorted(gen_entries) != sorted(names):
        raise MetricError("original and generated suites do not contain the same scenarios")
    jobs = _jobs(cfg)
    orig_jobs = [(n, p, cfg) for n, p in originals]
    gen_jobs = [(n, gen_dir / gen_entries[n]["scenario"], cfg) for n in names if gen_entries[n].get("scenario")]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            orig = list(pool.map(_evaluate_one, orig_jobs))
            gen_list = list(pool.map(_evaluate_one, gen_jobs))
    else:
        orig = [_evaluate_one(j) for j in orig_jobs]
        gen_list = [_evaluate_one(j) for j in gen_jobs]
    by_name = {r.name: r for r in gen_list}
    generated = [by_name.get(n) for n in names]
    label = cfg["mode"]
    gen_cfg = gen_dir / "config.json"
    if gen_cfg.exists():
        label = json.loads(gen_cfg.read_text()).get("mode", label)
    o_rep, g_rep = suite_evaluate(orig, generated, label=label)
    out = Path(args.out)
    _write(out / "original.csv", o_rep.to_csv())
    _write(out / "generated.csv", g_rep.to_csv())
    _write(out / "summary.json", _dump({"rows": [o_rep.summary(), g_rep.summary()]}))
    cfg_echo = dict(cfg)
    cfg_echo.pop("jobs", None)
    _write(out / "config.json", _dump({"command": "evaluate", **cfg_echo}))
    for row in (o_rep.summary(), g_rep.summary()):
        print(" ".join(f"{k}={v if not isinstance(v, float) else round(v, 2)}" for k, v in row.items()))
    return EXIT_OK


# ---------------------------------------------------------------------------
# render


def cmd_render(args) -> int:
    path = Path(args.input)
    chosen = None
    if path.name.endswith(".result.json"):
        result = json.loads(path.read_text())
        chosen = result.get("chosen_adversary")
        path = path.with_name(path.name.replace(".result.json", ".scenario.json"))
    s = load_scenario(path)
    frames = args.frame if args.frame else [-1]
    spec = RenderSpec(frames=tuple(frames), window=args.window, size=args.size)
    out = Path(args.out)
    stem = path.name[: -len(".json")]
    for f in frames:
        try:
            svg = render_svg(s, f, spec, chosen)
        except RenderError as e:
            raise UsageError(str(e)) from e
        k = f + s.horizon if f < 0 else f
        _write(out / f"{stem}.frame{k:03d}.svg", svg)
    print(f"wrote {len(frames)} frame(s) to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# selftest


def cmd_selftest(args) -> int:
    from . import selftest

    results = selftest.run(quick=args.quick)
    for r in results:
        print(r.line())
    return EXIT_OK if all(r.passed for r in results) else EXIT_RUNTIME


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="advscene", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("synth", help="write synthetic collision-free scenarios")
    s.add_argument("--template", help="mixed (default) or one of " + ", ".join(TEMPLATES))
    s.add_argument("--count", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--param", action="append", metavar="KEY=JSON", help="template parameter override")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    def gen_opts(q):
        q.add_argument("--mode", choices=("king", "regents"))
        q.add_argument("--lr", type=float)
        q.add_argument("--max-iters", type=int)
        q.add_argument("--tau-front", type=float)
        q.add_argument("--tau-rear", type=float)
        q.add_argument("--orange-half-angle-deg", type=float)
        q.add_argument("--ego-grad", choices=("attach", "detach"))
        q.add_argument("--planner", choices=("pure_pursuit", "braking"))
        q.add_argument("--seed", type=int)
        q.add_argument("--jobs", type=int)
        q.add_argument("--config")
        q.add_argument("--out", required=True)

    g = sub.add_parser("generate", help="turn scenarios into ego-collision scenarios")
    g.add_argument("inputs", nargs="+", help="scenario files or directories")
    gen_opts(g)
    g.set_defaults(func=cmd_generate)

    e = sub.add_parser("evaluate", help="score original and generated suites")
    e.add_argument("--original", required=True)
    e.add_argument("--generated", required=True)
    gen_opts(e)
    e.set_defaults(func=cmd_evaluate)

    r = sub.add_parser("render", help="render scenario frames as SVG")
    r.add_argument("input", help="scenario JSON or a *.result.json from generate")
    r.add_argument("--frame", type=int, action="append", help="step index (negative counts from the end)")
    r.add_argument("--window", type=float, default=60.0)
    r.add_argument("--size", type=int, default=600)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_render)

    t = sub.add_parser("selftest", help="run the geometry and gradient oracles")
    t.add_argument("--quick", action="store_true")
    t.set_defaults(func=cmd_selftest)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "func", None):
            raise UsageError("a command is required")
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (ScenarioError, ConfigError, MetricError, SynthError, MapConstructionError, RenderError) as e:
        print(f"validation error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as e:  # noqa: BLE001 - report anything else as a runtime failure
        print(f"runtime error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
