"""Figure rendering, config handling, and the command-line surface.

Heavy subcommands (bench, run) are exercised against canned reports or a
no-op task so the CLI plumbing is covered without re-running the full
benchmark battery here.
"""

import json

import numpy as np
import pytest
import yaml

from doughplan import evaluation, geometry, hlp
from doughplan.cli import (
    ConfigError,
    RunConfig,
    _resolve_task,
    gradcheck_physics,
    main,
)
from doughplan.evaluation import ScoreReport, TaskSpec, TrialResult
from doughplan.physics import SimConfig, ToolPose
from doughplan.planner import IterationRecord, PlannerConfig, PlanTrace
from doughplan.report import (
    save_cloud_figure,
    save_score_figure,
    save_trace_figure,
)

PNG_MAGIC = b"\x89PNG"


def _assert_png(path):
    assert path.is_file()
    data = path.read_bytes()
    assert len(data) > 800 and data[:4] == PNG_MAGIC


def _toy_trace():
    pose = ToolPose(position=np.array([0.5, 0.3, 0.0]))
    mk = lambda **kw: IterationRecord(  # noqa: E731
        pose=pose, actions=np.zeros((8, 4)), candidate=np.zeros((5, 2)), **kw)
    records = [
        mk(t=0, reset=False, emd_before=1e-2, emd_after=6e-3, accepted=True),
        mk(t=8, reset=False, emd_before=6e-3, emd_after=float("inf"),
           accepted=False, diverged=True),
        mk(t=8, reset=True, emd_before=6e-3, emd_after=7e-3, accepted=False),
        mk(t=8, reset=True, emd_before=6e-3, emd_after=4e-3, accepted=True),
    ]
    return PlanTrace(records=records, emd_initial=1e-2, emd_final=4e-3,
                     threshold=5e-4, final_positions=np.zeros((5, 2)))


def _fake_reports():
    rep = ScoreReport(task="spread", threshold=0.4, runtime=3.0)
    rep.trials = [
        TrialResult(seed=0, score=0.61, succeeded=True, runtime=1.5),
        TrialResult(seed=1, error="RuntimeError: boom", runtime=1.5),
    ]
    low = ScoreReport(task="cut", threshold=0.4, runtime=2.0)
    low.trials = [TrialResult(seed=0, score=-0.2, succeeded=False, runtime=2.0)]
    return [rep, low]


# ---------------------------------------------------------------------------
# figures
# ---------------------------------------------------------------------------


def test_trace_figure_written(tmp_path):
    out = save_trace_figure(_toy_trace(), tmp_path / "trace.png")
    _assert_png(out)


def test_cloud_figure_handles_both_dims(tmp_path):
    rng = np.random.default_rng(0)
    for dim in (2, 3):
        pts = rng.uniform(size=(40, dim))
        out = save_cloud_figure(pts, pts + 0.05, tmp_path / f"cloud{dim}.png",
                                title="overlay")
        _assert_png(out)


def test_score_figure_written(tmp_path):
    # second report has a negative mean: the axis must still include it
    out = save_score_figure(_fake_reports(), tmp_path / "scores.png")
    _assert_png(out)


# ---------------------------------------------------------------------------
# config file handling
# ---------------------------------------------------------------------------


def test_runconfig_defaults_and_file_load(tmp_path):
    assert RunConfig.load(None) == RunConfig()
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump({
        "seed": 11,
        "out": str(tmp_path / "runs"),
        "tasks": ["spread"],
        "planner": {"max_steps": 32, "L": 8},
        "sim": {"dim": 2, "grid_res": 32},
        "sinkhorn": {"epsilon": 1e-3},
    }))
    cfg = RunConfig.load(str(path))
    assert cfg.seed == 11 and cfg.planner["L"] == 8
    assert cfg.effective()["sim"]["grid_res"] == 32


def test_runconfig_cli_overrides():
    import argparse

    cfg = RunConfig(seed=1, out="a")
    merged = cfg.merged(argparse.Namespace(seed=7, out="b"))
    assert (merged.seed, merged.out) == (7, "b")
    same = cfg.merged(argparse.Namespace(seed=None, out=None))
    assert (same.seed, same.out) == (1, "a")


@pytest.mark.parametrize("doc", [
    {"colour": "red"},                       # unknown top-level key
    {"planner": {"sim": {}}},                # sim is its own section
    {"planner": {"nope": 1}},
    {"sim": {"nope": 1}},
    {"sinkhorn": {"nope": 1}},
    {"trials": 0},
    {"llm": {"fixture_dir": "/nonexistent/fixtures"}},
])
def test_runconfig_rejects_bad_documents(tmp_path, doc):
    path = tmp_path / "bad.yaml"
    path.write_text(yaml.safe_dump(doc))
    with pytest.raises(ConfigError):
        RunConfig.load(str(path))


def test_runconfig_rejects_bad_files(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        RunConfig.load(str(tmp_path / "missing.yaml"))
    seq = tmp_path / "seq.yaml"
    seq.write_text("- 1\n- 2\n")
    with pytest.raises(ConfigError, match="mapping"):
        RunConfig.load(str(seq))


def test_bad_config_maps_to_exit_3(tmp_path, capsys):
    rc = main(["gradcheck", "--module", "transport",
               "--config", str(tmp_path / "missing.yaml")])
    assert rc == 3
    assert "error:" in capsys.readouterr().err


def test_resolve_task_applies_config_sections():
    cfg = RunConfig(planner={"L": 8, "J": 2},
                    sim={"dim": 2, "grid_res": 32},
                    sinkhorn={"epsilon": 1e-3})
    task = _resolve_task("spread", cfg)
    assert task.planner.L == 8 and task.planner.J == 2
    assert task.planner.sim.grid_res == 32
    assert task.planner.sinkhorn.epsilon == 1e-3
    with pytest.raises(ConfigError, match="unknown task"):
        _resolve_task("souffle", RunConfig())


# ---------------------------------------------------------------------------
# plan subcommand
# ---------------------------------------------------------------------------


def test_cli_plan_donut(tmp_path, capsys):
    rc = main(["plan", "donut", "--out", str(tmp_path), "--points", "200"])
    assert rc == 0
    assert "-> pass" in capsys.readouterr().out
    out = tmp_path / "plan-donut"
    for name in ("config.yaml", "prompt.txt", "plan.json", "validation.txt",
                 "stage_0.ply", "stage_1.ply"):
        assert (out / name).is_file()
    assert not (out / "stage_2.ply").exists()
    ply = (out / "stage_0.ply").read_text()
    assert ply.startswith("ply") and "element vertex 200" in ply
    assert "torus" in (out / "plan.json").read_text()


def test_cli_plan_rejected_volume_budget(tmp_path):
    rc = main(["plan", "donut_no_vp", "--volume", "0.001",
               "--out", str(tmp_path), "--points", "100"])
    assert rc == 2
    text = (tmp_path / "plan-donut_no_vp" / "validation.txt").read_text()
    assert "-> reject" in text


def test_cli_plan_unknown_fixture_is_config_error(tmp_path, capsys):
    rc = main(["plan", "croissant", "--volume", "0.001",
               "--out", str(tmp_path)])
    assert rc == 3
    assert "croissant" in capsys.readouterr().err


def test_cli_plan_live_without_credential(tmp_path, monkeypatch, capsys):
    monkeypatch.delenv("OPENAI_API_KEY", raising=False)
    rc = main(["plan", "donut", "--live", "--out", str(tmp_path)])
    assert rc == 3
    assert "OPENAI_API_KEY" in capsys.readouterr().err


def test_cli_plan_parse_failure_maps_to_exit_2(tmp_path, monkeypatch, capsys):
    def broken(raw):
        raise hlp.PlanParseError("stage 0: missing field", stage=0)

    monkeypatch.setattr(hlp, "parse_plan", broken)
    rc = main(["plan", "donut", "--out", str(tmp_path)])
    assert rc == 2
    assert "plan rejected" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# gradcheck subcommand
# ---------------------------------------------------------------------------


def test_cli_gradcheck_transport_passes(tmp_path, capsys):
    rc = main(["gradcheck", "--module", "transport",
               "--out", str(tmp_path), "--seed", "0"])
    out = capsys.readouterr().out
    assert rc == 0
    assert "gradcheck transport: PASS" in out
    assert (tmp_path / "gradcheck" / "gradcheck.txt").is_file()


def test_cli_gradcheck_corrupted_component_is_named(tmp_path, capsys):
    rc = main(["gradcheck", "--module", "transport", "--out", str(tmp_path),
               "--seed", "0", "--corrupt-index", "5"])
    out = capsys.readouterr().out
    assert rc == 1
    assert "FAIL at instance 0 component 5" in out


def test_gradcheck_physics_agrees_and_detects_corruption():
    ok, worst, _, lines = gradcheck_physics(seed=0, seeds=1)
    assert ok and worst < 0.05 and len(lines) == 1
    bad_ok, bad_worst, _, _ = gradcheck_physics(seed=0, seeds=1,
                                                corrupt_index=3)
    assert not bad_ok and bad_worst > 0.05


# ---------------------------------------------------------------------------
# bench subcommand (canned reports) and run subcommand (no-op task)
# ---------------------------------------------------------------------------


def test_cli_bench_artifacts(tmp_path, monkeypatch, capsys):
    monkeypatch.setattr(evaluation, "run_benchmark",
                        lambda tasks, seeds, **kw: _fake_reports())
    rc = main(["bench", "spread", "cut", "--out", str(tmp_path)])
    assert rc == 0
    assert "task" in capsys.readouterr().out
    out = tmp_path / "bench"
    _assert_png(out / "scores.png")
    assert "spread" in (out / "report.txt").read_text()
    doc = json.loads((out / "report.json").read_text())
    assert doc[0]["mean_score"] == pytest.approx(0.61)
    rows = (out / "report.csv").read_text().strip().splitlines()
    assert len(rows) == 4 and rows[0].startswith("task,seed,score")
    assert rows[2].split(",")[2] == ""  # errored trial has no score cell


def test_cli_bench_all_failures_exit_1(tmp_path, monkeypatch):
    rep = ScoreReport(task="spread", threshold=0.4)
    rep.trials = [TrialResult(seed=0, error="RuntimeError: boom")]
    monkeypatch.setattr(evaluation, "run_benchmark",
                        lambda tasks, seeds, **kw: [rep])
    assert main(["bench", "spread", "--out", str(tmp_path)]) == 1


def test_cli_bench_unknown_task_exit_3(tmp_path, capsys):
    assert main(["bench", "souffle", "--out", str(tmp_path)]) == 3
    assert "unknown task" in capsys.readouterr().err


def test_cli_run_noop_task(tmp_path, monkeypatch, capsys):
    sim2 = SimConfig(dim=2, grid_res=32)
    slab = geometry.Box(center=(0.5, sim2.floor_height + 0.04, 0.5),
                        half_extents=(0.05, 0.04, 0.05))
    noop = TaskSpec(
        name="noop", tool="knife", threshold=0.4, dim=2, n_particles=100,
        initial_shape=slab, target_shape=slab,
        planner=PlannerConfig(sim=sim2, L=8, J=4, learning_rate=0.05,
                              max_steps=24, max_resets=2))
    monkeypatch.setattr(evaluation, "task_catalog", lambda: {"noop": noop})

    rc = main(["run", "noop", "--out", str(tmp_path), "--seed", "0"])
    assert rc == 0
    assert "failure" in capsys.readouterr().out

    out = tmp_path / "run-noop"
    for name in ("config.yaml", "initial.ply", "stage_0_target.ply",
                 "stage_0_final.ply", "stage_0_trace.json"):
        assert (out / name).is_file()
    _assert_png(out / "stage_0_trace.png")
    _assert_png(out / "final_cloud.png")

    summary = json.loads((out / "score.json").read_text())
    assert summary["task"] == "noop" and not summary["succeeded"]
    assert abs(summary["score"]) <= 0.05
    assert summary["interrupted"] is False
    trace = json.loads((out / "stage_0_trace.json").read_text())
    assert {"emd_initial", "reset_count", "iterations"} <= set(trace)
