"""Config loading and end-to-end CLI tests on miniature runs."""

import os

import numpy as np
import pytest

from moepolicy.checkpoint import load_checkpoint
from moepolicy.cli import main
from moepolicy.config import (OUTPUT_DIR_ENV, format_config, load_config, output_dir)
from moepolicy.moe import ConfigurationError
from moepolicy.reports import read_metrics, strip_wall_clock

TINY_SET = [
    "--set", "model.n_blocks=2", "--set", "model.embed_dim=32",
    "--set", "model.n_heads=2", "--set", "model.n_experts=4",
    "--set", "model.expert_expansion=1", "--set", "model.t_diff=4",
    "--set", "model.encoder_hidden=32",
    "--set", "train.epochs=1", "--set", "train.steps_per_epoch=2",
    "--set", "train.batch_size=8", "--set", "data.demos=3",
]


# -- config ------------------------------------------------------------------


def test_defaults_match_schema():
    cfg = load_config()
    assert cfg.model["n_blocks"] == 4 and cfg.model["top_k"] == 2
    assert cfg.train["batch_size"] == 64 and cfg.train["lr"] == 1e-4
    assert cfg.task_ids == ["reach", "push", "push-then-reach"]


def test_unknown_key_rejected(tmp_path):
    path = tmp_path / "c.ini"
    path.write_text("[model]\nblocks = 4\n")
    with pytest.raises(ConfigurationError, match="unknown key"):
        load_config(str(path))


def test_unknown_section_rejected(tmp_path):
    path = tmp_path / "c.ini"
    path.write_text("[optimizer]\nlr = 0.1\n")
    with pytest.raises(ConfigurationError, match="unknown config section"):
        load_config(str(path))


def test_type_errors_are_loud(tmp_path):
    path = tmp_path / "c.ini"
    path.write_text("[train]\nepochs = soon\n")
    with pytest.raises(ConfigurationError, match="not a valid int"):
        load_config(str(path))
    path.write_text("[model]\nlight = maybe\n")
    with pytest.raises(ConfigurationError, match="boolean"):
        load_config(str(path))


def test_format_config_round_trips(tmp_path):
    cfg = load_config(overrides={"model": {"n_blocks": "6"}, "train": {"lr": "0.002"}})
    path = tmp_path / "echo.ini"
    path.write_text(format_config(cfg))
    again = load_config(str(path))
    assert again == cfg


def test_output_dir_resolution(monkeypatch):
    monkeypatch.delenv(OUTPUT_DIR_ENV, raising=False)
    assert output_dir() == "runs"
    monkeypatch.setenv(OUTPUT_DIR_ENV, "/tmp/elsewhere")
    assert output_dir() == "/tmp/elsewhere"
    assert output_dir("explicit") == "explicit"


def test_stage_plan_from_config():
    cfg = load_config(overrides={"stage": {"regime": "transfer", "new_top_k": "3"}})
    plan = cfg.stage_plan()
    assert plan.regime == "transfer" and plan.new_top_k == 3
    assert cfg.stage_plan("multitask").regime == "multitask"


# -- CLI flows -----------------------------------------------------------------


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """One gen-data + multitask-train pass shared by the CLI tests."""
    out = str(tmp_path_factory.mktemp("cliruns"))
    assert main(["gen-data", "--out", out, *TINY_SET]) == 0
    assert main(["train", "--regime", "multitask", "--out", out, *TINY_SET,
                 "--set", "train.eval_every=1", "--set", "train.eval_episodes=2"]) == 0
    return out


def test_gen_data_writes_and_refuses_overwrite(workdir, capsys):
    for tid in ("reach", "push", "push-then-reach"):
        assert os.path.exists(os.path.join(workdir, "data", f"{tid}.ds"))
    capsys.readouterr()
    assert main(["gen-data", "--out", workdir, *TINY_SET]) == 2
    assert "overwrite" in capsys.readouterr().err


def test_gen_data_is_deterministic(workdir, tmp_path):
    other = str(tmp_path / "again")
    assert main(["gen-data", "--out", other, *TINY_SET]) == 0
    for tid in ("reach", "push"):
        a = open(os.path.join(workdir, "data", f"{tid}.ds"), "rb").read()
        b = open(os.path.join(other, "data", f"{tid}.ds"), "rb").read()
        assert a == b


def test_train_writes_checkpoint_and_metrics(workdir):
    ckpt = os.path.join(workdir, "multitask.ckpt")
    assert os.path.exists(ckpt)
    loaded = load_checkpoint(ckpt)
    assert sorted(loaded.net.tasks) == ["push", "push-then-reach", "reach"]
    assert loaded.meta.stage == "multitask"
    recs = [r for r in read_metrics(os.path.join(workdir, "metrics.jsonl"))
            if r["run_id"] == "multitask-seed0"]
    assert [r["epoch"] for r in recs] == [1]
    assert recs[0]["success"] is not None


def test_train_run_is_deterministic_modulo_wall_clock(workdir, tmp_path):
    o1, o2 = str(tmp_path / "r1"), str(tmp_path / "r2")
    args = ["--regime", "multitask", *TINY_SET, "--set", "data.tasks=reach"]
    for o in (o1, o2):
        assert main(["gen-data", "--out", o, *TINY_SET, "--set", "data.tasks=reach"]) == 0
        assert main(["train", "--out", o, *args]) == 0
    m1 = strip_wall_clock(read_metrics(os.path.join(o1, "metrics.jsonl")))
    m2 = strip_wall_clock(read_metrics(os.path.join(o2, "metrics.jsonl")))
    assert m1 == m2
    c1 = open(os.path.join(o1, "multitask.ckpt"), "rb").read()
    c2 = open(os.path.join(o2, "multitask.ckpt"), "rb").read()
    assert c1 == c2


def test_train_transfer_requires_parent(workdir, capsys):
    assert main(["train", "--regime", "transfer", "--out", workdir, *TINY_SET]) == 2
    assert "error[config]" in capsys.readouterr().err


def test_continual_stage_via_cli(workdir, tmp_path):
    """Base on reach+push, then a continual stage adding the composed task."""
    out = str(tmp_path / "cont")
    base_set = [*TINY_SET, "--set", "data.tasks=reach,push"]
    assert main(["gen-data", "--out", out, *TINY_SET]) == 0
    assert main(["train", "--regime", "multitask", "--out", out, *base_set]) == 0
    parent = os.path.join(out, "multitask.ckpt")
    assert main(["train", "--regime", "continual", "--out", out, "--from", parent,
                 *TINY_SET, "--set", "stage.new_task=push-then-reach",
                 "--set", "stage.expand_count=2"]) == 0
    child = load_checkpoint(os.path.join(out, "continual.ckpt"))
    assert "push-then-reach" in child.net.tasks
    assert child.net.blocks[0].moe.n_experts == 4 + 2
    from moepolicy.checkpoint import verify_lineage
    verify_lineage(os.path.join(out, "continual.ckpt"), parent)


def test_transfer_and_fft_via_cli(workdir, tmp_path):
    out = str(tmp_path / "tr")
    base_set = [*TINY_SET, "--set", "data.tasks=reach,push"]
    assert main(["gen-data", "--out", out, *TINY_SET]) == 0
    assert main(["train", "--regime", "multitask", "--out", out, *base_set]) == 0
    parent = os.path.join(out, "multitask.ckpt")
    new = ["--set", "stage.new_task=push-then-reach"]
    assert main(["train", "--regime", "transfer", "--out", out, "--from", parent,
                 *TINY_SET, *new]) == 0
    assert main(["train", "--regime", "fft", "--out", out, "--from", parent,
                 *TINY_SET, *new]) == 0
    tr = load_checkpoint(os.path.join(out, "transfer.ckpt"))
    assert tr.net.blocks[0].moe.n_experts == 4  # no expansion on transfer


def test_eval_command(workdir, capsys):
    ckpt = os.path.join(workdir, "multitask.ckpt")
    assert main(["eval", "--ckpt", ckpt, "--task", "reach", "--episodes", "2",
                 "--out", workdir]) == 0
    outtext = capsys.readouterr().out
    assert "success rate" in outtext
    assert os.path.exists(os.path.join(workdir, "eval-reach.npz"))


def test_eval_unknown_task_lists_registry(workdir, capsys):
    ckpt = os.path.join(workdir, "multitask.ckpt")
    assert main(["eval", "--ckpt", ckpt, "--task", "juggle"]) == 4
    err = capsys.readouterr().err
    assert "error[lookup]" in err and "reach" in err


def test_report_usage_map(workdir):
    ckpt = os.path.join(workdir, "multitask.ckpt")
    assert main(["report", "--kind", "usage-map", "--ckpt", ckpt,
                 "--out", workdir]) == 0
    text = open(os.path.join(workdir, "usage-map.txt")).read()
    lines = text.strip().split("\n")
    for line in lines[1:]:
        # cells are rounded to 6 decimals, so allow per-cell rounding error
        assert abs(sum(float(v) for v in line.split("\t")[2:]) - 1.0) < 5e-6
    assert os.path.exists(os.path.join(workdir, "usage-map.png"))


def test_report_score_trace(workdir):
    ckpt = os.path.join(workdir, "multitask.ckpt")
    assert main(["report", "--kind", "score-trace", "--ckpt", ckpt,
                 "--task", "push-then-reach", "--episodes", "1",
                 "--out", workdir]) == 0
    path = os.path.join(workdir, "score-trace-push-then-reach.txt")
    lines = open(path).read().strip().split("\n")
    assert len(lines) > 1
    assert os.path.exists(path.replace(".txt", ".png"))


def test_report_stage_table(workdir):
    metrics = os.path.join(workdir, "metrics.jsonl")
    assert main(["report", "--kind", "stage-table", "--metrics", metrics,
                 "--out", workdir]) == 0
    text = open(os.path.join(workdir, "stage-table.txt")).read()
    assert text.startswith("stage\t")


def test_env_var_sets_output_dir(tmp_path, monkeypatch):
    out = str(tmp_path / "envruns")
    monkeypatch.setenv(OUTPUT_DIR_ENV, out)
    assert main(["gen-data", *TINY_SET, "--set", "data.tasks=reach"]) == 0
    assert os.path.exists(os.path.join(out, "data", "reach.ds"))


def test_corrupt_checkpoint_gives_data_error(workdir, tmp_path, capsys):
    bad = str(tmp_path / "bad.ckpt")
    open(bad, "wb").write(b"not a checkpoint at all")
    assert main(["eval", "--ckpt", bad, "--task", "reach"]) == 3
    assert "error[data]" in capsys.readouterr().err
