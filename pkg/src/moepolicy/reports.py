"""Metrics logging and report generation.

Metrics are append-only JSONL records. Reports come in three kinds — expert
usage-frequency maps, per-timestep expert-score traces, and stage comparison
tables — each emitted both as a plain-text table (tab-separated, one header
line) and as a rendered PNG.
"""

from __future__ import annotations

import json
import os
import time
from typing import Dict, List, Optional, Sequence, Tuple

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .lifecycle import ScoreTrace
from .moe import AccountingError, ConfigurationError


# ---------------------------------------------------------------------------
# Metrics log


class MetricsLog:
    """Append-only JSONL metrics. Epochs must increase per run id; the
    wall_clock field is the only non-deterministic part of a record."""

    def __init__(self, path: str):
        self.path = path
        self._last_epoch: Dict[str, int] = {}
        if os.path.exists(path):
            for rec in read_metrics(path):
                self._last_epoch[rec["run_id"]] = rec["epoch"]

    def append(self, run_id: str, epoch: int, **fields) -> dict:
        last = self._last_epoch.get(run_id)
        if last is not None and epoch <= last:
            raise ConfigurationError(
                f"epoch {epoch} not after {last} for run {run_id!r}")
        rec = {"run_id": run_id, "epoch": epoch, **fields,
               "wall_clock": time.time()}
        with open(self.path, "a") as f:
            f.write(json.dumps(rec, sort_keys=True) + "\n")
        self._last_epoch[run_id] = epoch
        return rec


def read_metrics(path: str) -> List[dict]:
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


def strip_wall_clock(records: Sequence[dict]) -> List[dict]:
    """Drop timing fields so two runs of the same (config, seed) compare equal."""
    return [{k: v for k, v in rec.items() if k != "wall_clock"} for rec in records]


# ---------------------------------------------------------------------------
# Text tables


def _table(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    lines = ["\t".join(str(h) for h in header)]
    lines.extend("\t".join(str(c) for c in row) for row in rows)
    return "\n".join(lines) + "\n"


def usage_map_table(usage: Dict[Tuple[str, int], np.ndarray]) -> str:
    """One row per (task, layer): normalized expert selection frequencies."""
    if not usage:
        raise AccountingError(
            "no usage snapshot in this checkpoint; re-run training or an "
            "evaluation pass with accounting enabled")
    width = max(len(np.asarray(row)) for row in usage.values())
    header = ["task", "layer"] + [f"expert{i}" for i in range(width)]
    rows = []
    for (task_id, layer) in sorted(usage, key=lambda k: (k[1], k[0])):
        freq = np.asarray(usage[(task_id, layer)], dtype=np.float64)
        padded = np.pad(freq, (0, width - freq.size))
        rows.append([task_id, layer] + [f"{v:.6f}" for v in padded])
    return _table(header, rows)


def score_trace_table(traces: Sequence[ScoreTrace]) -> str:
    """One row per control step across episodes: episode, step, phase, scores."""
    if not traces:
        raise ConfigurationError("no score traces given")
    width = traces[0].scores.shape[1]
    header = ["episode", "step", "phase"] + [f"expert{i}" for i in range(width)]
    rows = []
    for ep, tr in enumerate(traces):
        for step in range(tr.scores.shape[0]):
            rows.append([ep, step, int(tr.phases[step])]
                        + [f"{v:.6f}" for v in tr.scores[step]])
    return _table(header, rows)


def stage_table(stages: Sequence[dict]) -> str:
    """Per-stage success rates, one column per task; '-' marks tasks the
    stage did not evaluate. Expects dicts with 'stage' and 'success' keys."""
    if not stages:
        raise ConfigurationError("no stage records given")
    tasks: List[str] = []
    for rec in stages:
        for tid in rec["success"]:
            if tid not in tasks:
                tasks.append(tid)
    header = ["stage"] + tasks + ["tp", "ap"]
    rows = []
    for rec in stages:
        row = [rec["stage"]]
        row += [f"{rec['success'][t]:.2f}" if t in rec["success"] else "-" for t in tasks]
        row += [rec.get("tp", "-"), rec.get("ap", "-")]
        rows.append(row)
    return _table(header, rows)


# ---------------------------------------------------------------------------
# Renderings


def render_usage_map(usage: Dict[Tuple[str, int], np.ndarray], path: str) -> None:
    """Heatmap of selection frequency: one row per (task, layer)."""
    if not usage:
        raise AccountingError("no usage snapshot to render")
    keys = sorted(usage, key=lambda k: (k[1], k[0]))
    width = max(len(np.asarray(usage[k])) for k in keys)
    grid = np.zeros((len(keys), width))
    for i, key in enumerate(keys):
        row = np.asarray(usage[key], dtype=np.float64)
        grid[i, : row.size] = row
    fig, ax = plt.subplots(figsize=(max(4, width * 0.6), max(3, len(keys) * 0.4)))
    im = ax.imshow(grid, aspect="auto", cmap="viridis", vmin=0.0)
    ax.set_yticks(range(len(keys)))
    ax.set_yticklabels([f"{t} / L{layer}" for t, layer in keys], fontsize=8)
    ax.set_xlabel("expert")
    ax.set_title("expert selection frequency")
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def render_score_trace(traces: Sequence[ScoreTrace], path: str,
                       max_episodes: int = 4) -> None:
    """Per-expert score lines over control steps, phase changes shaded."""
    if not traces:
        raise ConfigurationError("no score traces to render")
    shown = traces[:max_episodes]
    fig, axes = plt.subplots(len(shown), 1, figsize=(7, 2.2 * len(shown)),
                             squeeze=False)
    for ax, tr in zip(axes[:, 0], shown):
        for e in range(tr.scores.shape[1]):
            ax.plot(tr.scores[:, e], lw=1, label=f"e{e}")
        switches = np.nonzero(np.diff(tr.phases))[0]
        for s in switches:
            ax.axvline(s + 1, color="k", ls="--", lw=0.8)
        ax.set_ylabel("score")
        ax.set_ylim(0, 1)
    axes[-1, 0].set_xlabel("control step")
    axes[0, 0].legend(fontsize=6, ncol=4)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def render_stage_table(stages: Sequence[dict], path: str) -> None:
    """Grouped bar chart of per-task success by stage."""
    if not stages:
        raise ConfigurationError("no stage records to render")
    tasks: List[str] = []
    for rec in stages:
        for tid in rec["success"]:
            if tid not in tasks:
                tasks.append(tid)
    x = np.arange(len(stages))
    w = 0.8 / max(1, len(tasks))
    fig, ax = plt.subplots(figsize=(1.8 * len(stages) + 2, 3.2))
    for i, tid in enumerate(tasks):
        vals = [rec["success"].get(tid, np.nan) for rec in stages]
        ax.bar(x + i * w, vals, width=w, label=tid)
    ax.set_xticks(x + 0.4 - w / 2)
    ax.set_xticklabels([rec["stage"] for rec in stages], fontsize=8)
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("success rate")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
