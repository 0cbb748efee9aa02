"""Operator entry point: plan, run, bench, and gradcheck subcommands.

Every command is reproducible from (config, seed): all randomness flows
from the single seed, and each command writes a copy of its effective
configuration next to its outputs. Exit codes are 0 for success, 1 for a
runtime failure, 2 for a validation reject, and 3 for configuration or
credential problems.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

from . import evaluation, hlp, report, transport
from .evaluation import _settle  # package-internal: shared with run_trial
from .geometry import write_ply
from .physics import (
    ActionSequence,
    SimConfig,
    ToolPose,
    grad_actions,
    initial_state,
    tool_catalog,
)
from .planner import PlannerConfig, mpc_run
from .transport import SinkhornParams

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_REJECT = 2
EXIT_CONFIG = 3

# Task descriptions sent to the planner for the shipped fixture tasks.
_TASK_TEXT = {
    "donut": ("Shape the ball of dough into a donut: flatten it first, then "
              "press a hole through the middle."),
    "baguette": ("Shape the ball of dough into a baguette: flatten it, then "
                 "roll it into a long round loaf."),
    "two_pancakes": ("Cut the dough bar into two halves and flatten each "
                     "half into a pancake, side by side."),
}


class ConfigError(ValueError):
    """Bad config file, unknown task, or missing referenced file."""


def _field_names(cls) -> set:
    return {f.name for f in dataclasses.fields(cls)}


def _check_keys(section: str, given: dict, allowed: set) -> None:
    unknown = set(given) - allowed
    if unknown:
        raise ConfigError(f"unknown {section} option(s): {', '.join(sorted(unknown))}")


@dataclass
class RunConfig:
    """Merged settings from the config file and command-line overrides."""

    seed: int = 0
    out: str = "runs"
    task: str | None = None
    tasks: list = field(default_factory=lambda: ["spread", "cut", "arrange"])
    trials: int = 5
    planner: dict = field(default_factory=dict)
    sim: dict = field(default_factory=dict)
    sinkhorn: dict = field(default_factory=dict)
    llm: dict = field(default_factory=dict)

    def __post_init__(self):
        _check_keys("planner", self.planner,
                    _field_names(PlannerConfig) - {"sim", "sinkhorn"})
        _check_keys("sim", self.sim, _field_names(SimConfig))
        _check_keys("sinkhorn", self.sinkhorn, _field_names(SinkhornParams))
        _check_keys("llm", self.llm, _field_names(hlp.LlmClientConfig))
        fixture = self.llm.get("fixture_dir")
        if fixture is not None and not Path(fixture).is_dir():
            raise ConfigError(f"llm.fixture_dir does not exist: {fixture}")
        if self.trials < 1:
            raise ConfigError("trials must be >= 1")

    @classmethod
    def load(cls, path: str | None) -> "RunConfig":
        if path is None:
            return cls()
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {path}")
        doc = yaml.safe_load(p.read_text()) or {}
        if not isinstance(doc, dict):
            raise ConfigError(f"config root must be a mapping: {path}")
        _check_keys("config", doc, _field_names(cls))
        return cls(**doc)

    def merged(self, args: argparse.Namespace) -> "RunConfig":
        out = self
        if getattr(args, "seed", None) is not None:
            out = replace(out, seed=args.seed)
        if getattr(args, "out", None) is not None:
            out = replace(out, out=args.out)
        return out

    def effective(self) -> dict:
        return dataclasses.asdict(self)


def _prepare_out(cfg: RunConfig, leaf: str) -> Path:
    out = Path(cfg.out) / leaf
    out.mkdir(parents=True, exist_ok=True)
    with (out / "config.yaml").open("w") as fh:
        yaml.safe_dump(cfg.effective(), fh, sort_keys=False)
    return out


def _pad3(pts: np.ndarray) -> np.ndarray:
    """PLY is always 3-D; planar clouds get z = 0."""
    pts = np.asarray(pts, dtype=float)
    if pts.shape[1] == 2:
        pts = np.hstack([pts, np.zeros((len(pts), 1))])
    return pts


def _resolve_task(name: str, cfg: RunConfig) -> evaluation.TaskSpec:
    catalog = evaluation.task_catalog()
    if name not in catalog:
        raise ConfigError(
            f"unknown task {name!r}; available: {', '.join(sorted(catalog))}")
    task = catalog[name]
    pcfg = task.planner if task.planner is not None else PlannerConfig()
    if cfg.sim:
        sim = pcfg.sim if pcfg.sim is not None else SimConfig(dim=task.dim)
        pcfg = replace(pcfg, sim=replace(sim, **cfg.sim))
    if cfg.sinkhorn:
        pcfg = replace(pcfg, sinkhorn=SinkhornParams(**cfg.sinkhorn))
    if cfg.planner:
        pcfg = replace(pcfg, **cfg.planner)
    return replace(task, planner=pcfg)


# ---------------------------------------------------------------------------
# plan
# ---------------------------------------------------------------------------


def cmd_plan(args: argparse.Namespace) -> int:
    cfg = RunConfig.load(args.config).merged(args)
    np.random.seed(cfg.seed % 2**32)
    out = _prepare_out(cfg, f"plan-{args.task}")

    volume = args.volume
    catalog = evaluation.task_catalog()
    if volume is None and args.task in catalog:
        volume = catalog[args.task].initial_volume
    if volume is None:
        raise ConfigError(
            f"initial dough volume for {args.task!r} is unknown; pass --volume")

    llm = dict(cfg.llm)
    if args.live:
        llm["fixture_dir"] = None
    elif llm.get("fixture_dir") is None:
        llm["fixture_dir"] = hlp.fixture_dir()
    client = hlp.LlmClientConfig(**llm)

    task_text = _TASK_TEXT.get(args.task, f"Shape the dough into: {args.task}.")
    prompt = hlp.build_prompt(task_text, tool_catalog())
    (out / "prompt.txt").write_text(prompt)

    raw = hlp.request_plan(client, prompt, task_name=args.task)
    plan = hlp.parse_plan(raw)
    (out / "plan.json").write_text(hlp.serialize_plan(plan))

    audit = hlp.validate_plan(plan, volume)
    (out / "validation.txt").write_text(audit.summary() + "\n")
    print(audit.summary())

    clouds = hlp.compile_subgoals(plan, args.points, seed=cfg.seed)
    for k, cloud in enumerate(clouds):
        write_ply(out / f"stage_{k}.ply", cloud)
    print(f"wrote {len(clouds)} stage cloud(s) to {out}")
    return EXIT_OK if audit.ok else EXIT_REJECT


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------


def cmd_run(args: argparse.Namespace) -> int:
    """One seeded trial with all intermediate artifacts flushed per stage.

    Stage traces land on disk as soon as each stage finishes, so an
    interrupted run keeps everything completed up to the interrupt.
    """
    cfg = RunConfig.load(args.config).merged(args)
    np.random.seed(cfg.seed % 2**32)
    task = _resolve_task(args.task, cfg)
    out = _prepare_out(cfg, f"run-{task.name}")

    pcfg = task.planner
    sim = pcfg.sim if pcfg.sim is not None else SimConfig(dim=task.dim)
    if sim.dim != task.dim:
        sim = replace(sim, dim=task.dim, grid_res=None)
    pcfg = replace(pcfg, sim=sim)

    pts = evaluation._sample_points(task.initial_shape, task.n_particles,
                                    cfg.seed, task.dim)
    state = initial_state(pts, sim, total_volume=task.initial_volume)
    state = _settle(state, sim)
    stages = evaluation.stage_targets(task, cfg.seed)
    catalog = tool_catalog()

    p0 = state.positions.copy()
    write_ply(out / "initial.ply", _pad3(p0))
    t0 = time.time()
    interrupted = False
    for k, (tool_name, target) in enumerate(stages):
        write_ply(out / f"stage_{k}_target.ply", _pad3(target))
        try:
            trace = mpc_run(state, target, catalog[tool_name], pcfg)
        except KeyboardInterrupt:
            interrupted = True
            break
        trace.save_json(out / f"stage_{k}_trace.json")
        write_ply(out / f"stage_{k}_final.ply", _pad3(trace.final_positions))
        report.save_trace_figure(trace, out / f"stage_{k}_trace.png")
        n, d = trace.final_positions.shape
        state = evaluation.SimState(
            trace.final_positions, np.zeros((n, d)),
            np.broadcast_to(np.eye(d), (n, d, d)).copy(),
            np.zeros((n, d, d)), np.zeros(n), state.mass, state.volume)

    try:
        score = evaluation.normalized_score(p0, state.positions, stages[-1][1])
    except ValueError:
        score = 0.0  # degenerate task: target indistinguishable from start
    ok = evaluation.success(score, task)
    row = f"{task.name:<14} {score:6.3f} / {'success' if ok else 'failure'}"
    print(row)
    report.save_cloud_figure(state.positions, stages[-1][1],
                             out / "final_cloud.png", title=row.strip())
    summary = {
        "task": task.name, "seed": cfg.seed, "score": score,
        "succeeded": bool(ok), "runtime": time.time() - t0,
        "interrupted": interrupted,
    }
    (out / "score.json").write_text(json.dumps(summary, indent=2) + "\n")
    return EXIT_RUNTIME if interrupted else EXIT_OK


# ---------------------------------------------------------------------------
# bench
# ---------------------------------------------------------------------------


def cmd_bench(args: argparse.Namespace) -> int:
    cfg = RunConfig.load(args.config).merged(args)
    np.random.seed(cfg.seed % 2**32)
    names = args.tasks if args.tasks else cfg.tasks
    tasks = [_resolve_task(n, cfg) for n in names]
    out = _prepare_out(cfg, "bench")

    seeds = range(cfg.seed, cfg.seed + cfg.trials)
    reports = evaluation.run_benchmark(tasks, seeds)

    table = evaluation.render_table(reports)
    print(table)
    (out / "report.txt").write_text(table + "\n")
    (out / "report.json").write_text(
        json.dumps(evaluation.reports_to_json(reports), indent=2) + "\n")
    with (out / "report.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["task", "seed", "score", "succeeded", "runtime", "error"])
        for rep in reports:
            for t in rep.trials:
                w.writerow([rep.task, t.seed,
                            "" if np.isnan(t.score) else f"{t.score:.6f}",
                            t.succeeded, f"{t.runtime:.2f}", t.error or ""])
    report.save_score_figure(reports, out / "scores.png")
    for rep in reports:
        for t in rep.trials:
            if t.traces:
                report.save_trace_figure(
                    t.traces[-1], out / f"{rep.task}_seed{t.seed}_trace.png")
                break
    print(f"wrote report to {out}")

    all_failed = all(t.error is not None for rep in reports for t in rep.trials)
    return EXIT_RUNTIME if (reports and all_failed) else EXIT_OK


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------


def _max_component_error(analytic: np.ndarray, numeric: np.ndarray):
    """Largest componentwise relative deviation and where it happens."""
    a = analytic.ravel()
    f = numeric.ravel()
    scale = np.maximum(np.abs(f), 1e-3 * np.abs(f).max() + 1e-12)
    rel = np.abs(a - f) / scale
    idx = int(np.argmax(rel))
    return float(rel[idx]), idx


def gradcheck_transport(seed: int = 0, instances: int = 20,
                        corrupt_index: int | None = None):
    """Transport gradient vs central differences on small random clouds.

    corrupt_index is a self-test hook: it perturbs that component of the
    first instance's analytic gradient so the check must fail there.
    """
    lines, worst, worst_at = [], 0.0, (0, 0)
    ok = True
    for i in range(instances):
        rng = np.random.default_rng(seed + i)
        x = rng.uniform(0.0, 1.0, (8, 2))
        y = rng.uniform(0.0, 1.0, (8, 2))
        # FD comparison is only meaningful with well-converged duals, so the
        # check pins a much tighter budget than the solver defaults.
        sp = transport.resolve_params(x, y, SinkhornParams(
            max_sinkhorn_iters=10_000, dual_tolerance=1e-7))
        g = transport.emd_gradient(x, y, sp)
        if corrupt_index is not None and i == 0:
            g = g.copy()
            g.flat[corrupt_index] += 0.5 * (abs(g.flat[corrupt_index]) + 1.0)
        h = 1e-5
        fd = np.zeros_like(x)
        for r in range(x.shape[0]):
            for c in range(x.shape[1]):
                xp = x.copy(); xp[r, c] += h
                xm = x.copy(); xm[r, c] -= h
                fd[r, c] = (transport.sinkhorn_divergence(xp, y, sp)
                            - transport.sinkhorn_divergence(xm, y, sp)) / (2 * h)
        rel, idx = _max_component_error(g, fd)
        lines.append(f"  instance {i}: max rel err {rel:.2e} at component {idx}")
        if rel > worst:
            worst, worst_at = rel, (i, idx)
        if rel > 1e-3:
            ok = False
    return ok, worst, worst_at, lines


def gradcheck_physics(seed: int = 0, seeds: int = 3,
                      corrupt_index: int | None = None):
    """Action gradients: adjoint pass vs finite differences on a 2-D toy."""
    sim = SimConfig(dim=2, grid_res=32)
    tool = tool_catalog()["rolling_pin"]
    lines, worst, worst_at = [], 0.0, (0, 0)
    ok = True
    for i in range(seeds):
        rng = np.random.default_rng(seed + i)
        pts = rng.uniform((0.42, 0.10), (0.58, 0.18), (60, 2))
        state = initial_state(pts, sim, total_volume=1e-3)
        pose = ToolPose(position=np.array([0.5, 0.24, 0.0]))
        acts = ActionSequence(
            rng.uniform(-0.25, 0.25, (3, 4)) * np.array([1.0, 1.0, 0.0, 1.0]))
        cand = pts + rng.uniform(-0.02, 0.02, pts.shape)
        ga = grad_actions(state, tool, pose, acts, cand, sim)
        if corrupt_index is not None and i == 0:
            ga = np.asarray(ga).copy()
            ga.flat[corrupt_index] += 0.5 * (abs(ga.flat[corrupt_index]) + 1.0)
        gf = grad_actions(state, tool, pose, acts, cand,
                          replace(sim, grad_mode="fd"))
        rel = float(np.linalg.norm(np.asarray(ga) - np.asarray(gf))
                    / (np.linalg.norm(np.asarray(gf)) + 1e-12))
        idx = int(np.argmax(np.abs(np.asarray(ga) - np.asarray(gf))))
        lines.append(f"  seed {seed + i}: norm rel dev {rel:.2e}"
                     f" (largest gap at component {idx})")
        if rel > worst:
            worst, worst_at = rel, (i, idx)
        if rel > 0.05:
            ok = False
    return ok, worst, worst_at, lines


def cmd_gradcheck(args: argparse.Namespace) -> int:
    cfg = RunConfig.load(args.config).merged(args)
    np.random.seed(cfg.seed % 2**32)
    out = _prepare_out(cfg, "gradcheck")
    checks = []
    if args.module in ("transport", "all"):
        checks.append(("transport", gradcheck_transport))
    if args.module in ("physics", "all"):
        checks.append(("physics", gradcheck_physics))

    failed = False
    lines_all = []
    for name, fn in checks:
        ok, worst, (inst, comp), lines = fn(seed=cfg.seed,
                                            corrupt_index=args.corrupt_index)
        verdict = "PASS" if ok else f"FAIL at instance {inst} component {comp}"
        head = f"gradcheck {name}: {verdict} (max rel err {worst:.2e})"
        print(head)
        for line in lines:
            print(line)
        lines_all.extend([head] + lines)
        failed |= not ok
    (out / "gradcheck.txt").write_text("\n".join(lines_all) + "\n")
    return EXIT_RUNTIME if failed else EXIT_OK


# ---------------------------------------------------------------------------
# argument wiring
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None,
                        help="YAML config file (see README for the schema)")
    common.add_argument("--seed", type=int, default=None,
                        help="seed for every stochastic choice")
    common.add_argument("--out", default=None, help="output directory root")

    p = argparse.ArgumentParser(
        prog="doughplan",
        description="Plan, simulate, and score dough-manipulation tasks.")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("plan", parents=[common],
                        help="request a staged plan and compile its subgoals")
    sp.add_argument("task", help="fixture/task name (e.g. donut)")
    sp.add_argument("--live", action="store_true",
                    help="query the configured endpoint instead of fixtures")
    sp.add_argument("--volume", type=float, default=None,
                    help="initial dough volume for the validation audit")
    sp.add_argument("--points", type=int, default=800,
                    help="points per compiled subgoal cloud")
    sp.set_defaults(fn=cmd_plan)

    sr = sub.add_parser("run", parents=[common],
                        help="run one seeded trial of a task end to end")
    sr.add_argument("task", help="task name from the catalog")
    sr.set_defaults(fn=cmd_run)

    sb = sub.add_parser("bench", parents=[common],
                        help="score a task suite over multiple seeds")
    sb.add_argument("tasks", nargs="*",
                    help="task names (default: suite from config)")
    sb.set_defaults(fn=cmd_bench)

    sg = sub.add_parser("gradcheck", parents=[common],
                        help="compare analytic gradients to finite differences")
    sg.add_argument("--module", choices=("transport", "physics", "all"),
                    default="all")
    sg.add_argument("--corrupt-index", type=int, default=None,
                    help="self-test hook: corrupt this gradient component")
    sg.set_defaults(fn=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, hlp.MissingCredentialError,
            hlp.MissingFixtureError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except hlp.PlanParseError as e:
        print(f"plan rejected: {e}", file=sys.stderr)
        return EXIT_REJECT
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as e:  # noqa: BLE001 - boundary: map to exit code
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
