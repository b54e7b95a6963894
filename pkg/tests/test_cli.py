"""End-to-end command tests over tiny configs.

Everything drives prilora.cli.main() in process; one test also exercises
the installed console script. Runs are kept to ~30 steps on a small model
so the whole module finishes in a few seconds.
"""

import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from prilora.cli import ABLATION_VARIANTS, ExperimentSpec, ablation_config, main
from prilora.config import parse_config_text
from prilora.errors import ConfigError
from prilora.train_harness import EvalPoint

TINY = """\
config_version = 1
name = tiny
task.vocab_size = 8
task.seq_len = 8
task.train_count = 160
task.eval_count = 48
model.layers = 2
model.d_model = 16
model.heads = 2
model.d_ff = 32
plan.first_rank = 2
plan.last_rank = 4
prune.interval = 10
train.steps = 30
train.eval_interval = 15
train.warmup_steps = 5
train.batch_size = 8
train.trajectory_coords = 2
"""


def write_cfg(path: Path, text: str = TINY) -> Path:
    path.write_text(text, encoding="utf-8")
    return path


def read_metrics(run_dir: Path) -> list[EvalPoint]:
    lines = (run_dir / "metrics.jsonl").read_text().splitlines()
    return [EvalPoint.from_json(line) for line in lines if line.strip()]


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    """One completed single-seed run, shared by the artifact inspections."""
    root = tmp_path_factory.mktemp("tiny")
    cfg = write_cfg(root / "tiny.cfg")
    out = root / "runs"
    assert main(["run", "--config", str(cfg), "--out", str(out)]) == 0
    return cfg, out / "tiny"


# -- validate-config -----------------------------------------------------------


def test_validate_config_prints_resolved_and_ok(tmp_path, capsys):
    cfg = write_cfg(tmp_path / "t.cfg")
    assert main(["validate-config", "--config", str(cfg)]) == 0
    out = capsys.readouterr().out
    assert "train.steps = 30" in out
    assert "ok: valid for seeds [0]" in out


def test_validate_config_rejects_unknown_key(tmp_path, capsys):
    cfg = write_cfg(tmp_path / "t.cfg", TINY + "plan.slope = 3\n")
    assert main(["validate-config", "--config", str(cfg)]) == 1
    assert "config error" in capsys.readouterr().err


def test_validate_config_rejects_unbuildable_values(tmp_path, capsys):
    # parses fine, but the rank exceeds what the layer widths allow
    cfg = write_cfg(tmp_path / "t.cfg", TINY + "plan.first_rank = 99\n")
    assert main(["validate-config", "--config", str(cfg)]) == 1


def test_missing_config_file_is_a_config_error(capsys):
    assert main(["run", "--config", "/nonexistent.cfg"]) == 1
    assert "cannot read config" in capsys.readouterr().err


def test_usage_errors_map_to_exit_one(tmp_path, capsys):
    assert main([]) == 1
    assert main(["run"]) == 1  # --config is required
    assert main(["run", "--config", "x", "--bogus"]) == 1


def test_bad_seed_and_job_flags(tmp_path, capsys):
    cfg = write_cfg(tmp_path / "t.cfg")
    assert main(["run", "--config", str(cfg), "--seeds", "1,two"]) == 1
    assert main(["run", "--config", str(cfg), "--seeds", ""]) == 1
    assert main(["run", "--config", str(cfg), "--seeds", "1,1"]) == 1
    assert main(["run", "--config", str(cfg), "--jobs", "0"]) == 1


# -- run -----------------------------------------------------------------------


def test_run_leaves_a_complete_artifact_set(tiny_run):
    _, group = tiny_run
    seed_dir = group / "seed_0"
    for name in ("config.resolved", "metrics.jsonl", "trajectory.jsonl",
                 "final.ckpt", "best.ckpt", "run.json"):
        assert (seed_dir / name).exists(), name
    assert (group / "config.resolved").exists()
    assert (group / "summary.json").exists()
    assert (group / "summary.tsv").exists()

    run = json.loads((seed_dir / "run.json").read_text())
    assert run["status"] == "complete"
    assert run["seed"] == 0
    assert run["base_hash_before"] == run["base_hash_after"]
    assert run["adapter_params"] == 1344  # (2+4) ranks x 224 dims per rank
    assert run["init_loss"] == pytest.approx(np.log(2.0), abs=1e-12)

    resolved = parse_config_text((seed_dir / "config.resolved").read_text())
    assert resolved["seed"] == 0
    assert resolved["train.steps"] == 30


def test_single_seed_summary_has_zero_std(tiny_run):
    _, group = tiny_run
    summary = json.loads((group / "summary.json").read_text())
    assert summary["seeds"] == [0]
    for metric in ("final_loss", "final_accuracy", "best_accuracy"):
        assert summary[metric]["std"] == 0.0


def test_summary_matches_recomputation_from_logs(tiny_run):
    _, group = tiny_run
    points = read_metrics(group / "seed_0")
    summary = json.loads((group / "summary.json").read_text())
    assert summary["final_loss"]["mean"] == points[-1].loss
    assert summary["final_accuracy"]["mean"] == points[-1].accuracy
    assert summary["best_accuracy"]["mean"] == max(p.accuracy for p in points)


def test_rerun_reproduces_identical_artifacts(tmp_path):
    cfg = write_cfg(tmp_path / "t.cfg")
    outs = []
    for sub in ("a", "b"):
        out = tmp_path / sub
        assert main(["run", "--config", str(cfg), "--out", str(out)]) == 0
        outs.append(out / "tiny")
    a, b = outs
    assert (a / "seed_0" / "metrics.jsonl").read_bytes() == \
           (b / "seed_0" / "metrics.jsonl").read_bytes()
    assert (a / "seed_0" / "final.ckpt").read_bytes() == \
           (b / "seed_0" / "final.ckpt").read_bytes()
    assert (a / "summary.json").read_text() == (b / "summary.json").read_text()


def test_parallel_jobs_match_serial(tmp_path):
    cfg = write_cfg(tmp_path / "t.cfg")
    serial, parallel = tmp_path / "serial", tmp_path / "parallel"
    assert main(["run", "--config", str(cfg), "--seeds", "0,1",
                 "--out", str(serial)]) == 0
    assert main(["run", "--config", str(cfg), "--seeds", "0,1",
                 "--out", str(parallel), "--jobs", "2"]) == 0
    for seed in (0, 1):
        assert (serial / "tiny" / f"seed_{seed}" / "metrics.jsonl").read_bytes() == \
               (parallel / "tiny" / f"seed_{seed}" / "metrics.jsonl").read_bytes()
    sa = json.loads((serial / "tiny" / "summary.json").read_text())
    pa = json.loads((parallel / "tiny" / "summary.json").read_text())
    assert sa == pa
    assert sa["seeds"] == [0, 1]


def test_divergent_run_flags_incomplete_and_exits_two(tmp_path, capsys):
    text = TINY.replace("name = tiny", "name = blowup")
    text += "task.kind = linear_probe\ntrain.optimizer = sgd\ntrain.lr = 1e20\n"
    cfg = write_cfg(tmp_path / "t.cfg", text)
    out = tmp_path / "runs"
    with np.errstate(over="ignore", invalid="ignore"):
        assert main(["run", "--config", str(cfg), "--out", str(out)]) == 2
    seed_dir = out / "blowup" / "seed_0"
    run = json.loads((seed_dir / "run.json").read_text())
    assert run["status"] == "incomplete"
    assert run["failed_step"] >= 1
    assert (seed_dir / "last_good.ckpt").exists()
    assert not (seed_dir / "final.ckpt").exists()
    assert "incomplete" in capsys.readouterr().err


# -- sweep-ratio -----------------------------------------------------------------


def test_sweep_orders_groups_by_ratio(tmp_path, capsys):
    cfg = write_cfg(tmp_path / "t.cfg")
    out = tmp_path / "runs"
    assert main(["sweep-ratio", "--config", str(cfg), "--out", str(out),
                 "--ratios", "0.5,0.25"]) == 0
    group = out / "tiny"
    assert (group / "ratio_0.25" / "seed_0" / "metrics.jsonl").exists()
    assert (group / "ratio_0.5" / "seed_0" / "metrics.jsonl").exists()
    rows = (group / "sweep.tsv").read_text().splitlines()
    assert rows[0].startswith("ratio\t")
    assert [row.split("\t")[0] for row in rows[1:]] == ["0.25", "0.5"]
    assert capsys.readouterr().out.startswith("ratio\t")


def test_sweep_requires_valid_ratios(tmp_path):
    cfg = write_cfg(tmp_path / "t.cfg")
    assert main(["sweep-ratio", "--config", str(cfg), "--out", str(tmp_path / "r")]) == 1
    assert main(["sweep-ratio", "--config", str(cfg), "--out", str(tmp_path / "r"),
                 "--ratios", "1.5"]) == 1
    assert main(["sweep-ratio", "--config", str(cfg), "--out", str(tmp_path / "r"),
                 "--ratios", ""]) == 1


def test_ratio_zero_sweep_equals_disabled_pruning(tmp_path, monkeypatch):
    cfg = write_cfg(tmp_path / "t.cfg")
    sweep_out = tmp_path / "sweep"
    assert main(["sweep-ratio", "--config", str(cfg), "--out", str(sweep_out),
                 "--ratios", "0"]) == 0

    monkeypatch.setenv("PRILORA_PRUNE__STRATEGY", "none")
    run_out = tmp_path / "off"
    assert main(["run", "--config", str(cfg), "--out", str(run_out)]) == 0

    swept = (sweep_out / "tiny" / "ratio_0" / "seed_0" / "metrics.jsonl").read_bytes()
    off = (run_out / "tiny" / "seed_0" / "metrics.jsonl").read_bytes()
    assert swept == off


# -- ablate ----------------------------------------------------------------------


def test_ablation_config_variants():
    cfg = parse_config_text(TINY)
    assert len(ABLATION_VARIANTS) == 8
    fixed = ablation_config(cfg, "fixed")
    assert fixed["plan.kind"] == "uniform" and fixed["plan.rank"] == 3
    conc = ablation_config(cfg, "concentrated")
    assert conc["plan.kind"] == "concentrated" and conc["plan.last_rank"] == 9
    assert ablation_config(cfg, "no_pruning")["prune.strategy"] == "none"
    assert ablation_config(cfg, "random_A_cols")["prune.strategy"] == "random_A_cols"
    assert ablation_config(cfg, "full") == {**cfg, "prune.strategy": "prilora_A"}
    assert cfg["plan.kind"] == "linear"  # base mapping untouched
    with pytest.raises(ConfigError):
        ablation_config(cfg, "slimmer")
    with pytest.raises(ConfigError):
        ablation_config({**cfg, "plan.kind": "uniform"}, "fixed")


def test_ablate_runs_the_full_grid(tmp_path, capsys):
    cfg_path = write_cfg(tmp_path / "t.cfg")
    before = cfg_path.read_bytes()
    out = tmp_path / "runs"
    assert main(["ablate", "--config", str(cfg_path), "--out", str(out),
                 "--seeds", "3"]) == 0
    assert cfg_path.read_bytes() == before

    grid_dir = out / "tiny" / "ablate"
    grid = json.loads((grid_dir / "grid.json").read_text())
    assert grid["base_seed"] == 3
    assert set(grid["variants"]) == set(ABLATION_VARIANTS)

    params = {}
    for variant in ABLATION_VARIANTS:
        run = json.loads((grid_dir / variant / "run.json").read_text())
        assert run["status"] == "complete", variant
        assert run["seed"] == 3
        params[variant] = run["adapter_params"]
    same = {v: p for v, p in params.items() if v != "concentrated"}
    assert len(set(same.values())) == 1
    assert params["concentrated"] != params["full"]

    resolved = parse_config_text((grid_dir / "no_pruning" / "config.resolved").read_text())
    assert resolved["prune.strategy"] == "none"
    assert resolved["plan.kind"] == "linear"

    rows = (grid_dir / "ablate.tsv").read_text().splitlines()
    assert len(rows) == 9
    assert capsys.readouterr().out.startswith("variant\t")


def test_ablate_rejects_non_linear_base(tmp_path):
    cfg = write_cfg(tmp_path / "t.cfg", TINY + "plan.kind = uniform\n")
    assert main(["ablate", "--config", str(cfg), "--out", str(tmp_path / "r")]) == 1


# -- report ----------------------------------------------------------------------


def test_report_exports_plot_tables(tiny_run, capsys):
    _, group = tiny_run
    assert main(["report", "--out", str(group)]) == 0
    seed_dir = group / "seed_0"

    metrics_rows = (seed_dir / "metrics.tsv").read_text().splitlines()
    points = read_metrics(seed_dir)
    assert len(metrics_rows) == len(points) + 1
    assert metrics_rows[0] == "step\tloss\taccuracy\tnonzero_params\tadapter_params\tnonzero_fraction"

    nz_rows = (seed_dir / "nonzero.tsv").read_text().splitlines()
    assert len(nz_rows) == len(points) + 1

    traj_rows = (seed_dir / "trajectory.tsv").read_text().splitlines()
    assert len(traj_rows) == 30 + 1  # one row per training step
    header = traj_rows[0].split("\t")
    assert header[:3] == ["step", "loss", "prune_event"]
    assert len(header) == 5  # two traced coordinates
    flagged = [row.split("\t")[0] for row in traj_rows[1:] if row.split("\t")[2] == "1"]
    assert flagged == ["10", "20", "30"]


def test_report_lists_missing_logs(tmp_path, capsys):
    present = tmp_path / "present"
    present.mkdir()
    (present / "metrics.jsonl").write_text(
        EvalPoint(0, 0.7, 0.5, 10, 20, []).to_json() + "\n"
    )
    absent = tmp_path / "absent"
    assert main(["report", str(present), str(absent)]) == 0
    err = capsys.readouterr().err
    assert str(absent / "metrics.jsonl") in err
    assert (present / "metrics.tsv").exists()
    assert not (absent / "metrics.tsv").exists()


def test_report_with_nothing_to_do(capsys):
    assert main(["report"]) == 0
    assert "no run directories" in capsys.readouterr().err


# -- spec type and entry point -----------------------------------------------------


def test_experiment_spec_validation(tmp_path):
    with pytest.raises(ConfigError):
        ExperimentSpec("", {}, (1,), tmp_path)
    with pytest.raises(ConfigError):
        ExperimentSpec("x", {}, (), tmp_path)
    with pytest.raises(ConfigError):
        ExperimentSpec("x", {}, (1, 1), tmp_path)
    spec = ExperimentSpec("x", {}, (1, 2), tmp_path)
    assert spec.group_dir == tmp_path / "x"


def test_console_script_is_installed(tmp_path):
    cfg = write_cfg(tmp_path / "t.cfg")
    proc = subprocess.run(
        ["prilora", "validate-config", "--config", str(cfg)],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0, proc.stderr
    assert "ok: valid" in proc.stdout
