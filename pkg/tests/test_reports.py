"""Metrics-log and report-generation tests."""

import numpy as np
import pytest

from moepolicy.lifecycle import ScoreTrace
from moepolicy.moe import AccountingError, ConfigurationError
from moepolicy.reports import (MetricsLog, read_metrics, render_score_trace,
                               render_stage_table, render_usage_map,
                               score_trace_table, stage_table, strip_wall_clock,
                               usage_map_table)


USAGE = {("reach", 0): np.array([0.5, 0.5, 0.0, 0.0]),
         ("push", 0): np.array([0.0, 0.0, 0.75, 0.25]),
         ("reach", 1): np.array([1.0, 0.0, 0.0, 0.0])}


def make_trace(steps=6, experts=4, seed=0):
    rng = np.random.default_rng(seed)
    raw = rng.uniform(size=(steps, experts))
    return ScoreTrace(raw / raw.sum(axis=1, keepdims=True),
                      np.array([1] * (steps // 2) + [2] * (steps - steps // 2)),
                      True)


def test_metrics_log_appends_and_reads(tmp_path):
    path = str(tmp_path / "m.jsonl")
    log = MetricsLog(path)
    log.append("run-a", 1, loss=0.5)
    log.append("run-a", 2, loss=0.4)
    log.append("run-b", 1, loss=0.9)
    recs = read_metrics(path)
    assert [r["epoch"] for r in recs] == [1, 2, 1]
    assert all("wall_clock" in r for r in recs)


def test_metrics_log_rejects_non_increasing_epoch(tmp_path):
    log = MetricsLog(str(tmp_path / "m.jsonl"))
    log.append("r", 3, loss=0.1)
    with pytest.raises(ConfigurationError):
        log.append("r", 3, loss=0.1)


def test_metrics_log_resumes_from_existing_file(tmp_path):
    path = str(tmp_path / "m.jsonl")
    MetricsLog(path).append("r", 5, loss=0.1)
    with pytest.raises(ConfigurationError):
        MetricsLog(path).append("r", 4, loss=0.1)


def test_strip_wall_clock_makes_records_comparable(tmp_path):
    p1, p2 = str(tmp_path / "1.jsonl"), str(tmp_path / "2.jsonl")
    for p in (p1, p2):
        MetricsLog(p).append("r", 1, loss=0.25)
    assert strip_wall_clock(read_metrics(p1)) == strip_wall_clock(read_metrics(p2))


def test_usage_map_table_rows_sum_to_one():
    text = usage_map_table(USAGE)
    lines = text.strip().split("\n")
    assert lines[0].split("\t")[:2] == ["task", "layer"]
    for line in lines[1:]:
        cells = line.split("\t")
        assert abs(sum(float(v) for v in cells[2:]) - 1.0) < 1e-6
    assert len(lines) == 1 + len(USAGE)


def test_usage_map_requires_snapshot():
    with pytest.raises(AccountingError, match="accounting"):
        usage_map_table({})


def test_usage_map_pads_expanded_layers():
    usage = {("a", 0): np.array([1.0]), ("b", 0): np.array([0.5, 0.5, 0.0])}
    lines = usage_map_table(usage).strip().split("\n")
    assert lines[0].count("expert") == 3
    a_row = [l for l in lines if l.startswith("a\t")][0]
    assert a_row.split("\t")[2:] == ["1.000000", "0.000000", "0.000000"]


def test_score_trace_table_includes_phase_labels():
    tr = make_trace()
    lines = score_trace_table([tr]).strip().split("\n")
    assert len(lines) == 1 + tr.scores.shape[0]
    phases = [int(l.split("\t")[2]) for l in lines[1:]]
    assert phases == list(tr.phases)


def test_stage_table_marks_absent_tasks():
    stages = [{"stage": "s1", "success": {"reach": 1.0}},
              {"stage": "s2", "success": {"reach": 1.0, "push": 0.8}}]
    lines = stage_table(stages).strip().split("\n")
    assert lines[0].split("\t")[:3] == ["stage", "reach", "push"]
    assert lines[1].split("\t")[2] == "-"
    assert lines[2].split("\t")[2] == "0.80"


def test_renderings_write_png_files(tmp_path):
    traces = [make_trace(seed=s) for s in range(3)]
    stages = [{"stage": "s1", "success": {"reach": 0.9, "push": 0.8}},
              {"stage": "s2", "success": {"reach": 0.9, "push": 0.8, "both": 0.7}}]
    paths = [str(tmp_path / n) for n in ("u.png", "t.png", "s.png")]
    render_usage_map(USAGE, paths[0])
    render_score_trace(traces, paths[1])
    render_stage_table(stages, paths[2])
    for p in paths:
        with open(p, "rb") as f:
            assert f.read(8)[1:4] == b"PNG"
