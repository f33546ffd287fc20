"""Command-line surface: gen-data, train, eval, report.

Every command is deterministic given (config, seed) apart from wall-clock
fields in the metrics log. Output lands in --out, the MOEPOLICY_OUT
environment variable, or ./runs, in that order. Exit codes: 0 success,
2 configuration, 3 data/format, 4 lookup, 5 accounting, 1 anything else.
"""

from __future__ import annotations

import argparse
import os
import sys
from typing import Dict, List, Optional

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .config import (Config, OUTPUT_DIR_ENV, format_config, load_config, output_dir)
from .data import (Dataset, FormatError, build_windows, generate_dataset,
                   load_dataset, save_dataset)
from .diffusion import DenoiserNetwork, DiffusionSchedule, count_parameters
from .envs import DataError, ENV_IDS, ExpertFailure
from .lifecycle import (Task, TaskSet, evaluate_network, expert_score_trace,
                        train_continual, train_full_finetune, train_multitask,
                        train_transfer)
from .moe import AccountingError, ConfigurationError, LookupError_
from .reports import (MetricsLog, read_metrics, render_score_trace,
                      render_stage_table, render_usage_map, score_trace_table,
                      stage_table, usage_map_table)

EXIT_CODES = [
    (ConfigurationError, 2, "config"),
    ((FormatError, DataError, ExpertFailure, FileNotFoundError), 3, "data"),
    (LookupError_, 4, "lookup"),
    (AccountingError, 5, "accounting"),
]


def _parse_overrides(pairs: Optional[List[str]]) -> Dict[str, Dict[str, str]]:
    out: Dict[str, Dict[str, str]] = {}
    for pair in pairs or []:
        if "=" not in pair or "." not in pair.split("=", 1)[0]:
            raise ConfigurationError(f"--set expects section.key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        sec, k = key.split(".", 1)
        out.setdefault(sec, {})[k] = value
    return out


def _load(args) -> Config:
    cfg = load_config(args.config, _parse_overrides(getattr(args, "set", None)))
    print(format_config(cfg))
    return cfg


def _dataset_path(out: str, task_id: str) -> str:
    return os.path.join(out, "data", f"{task_id}.ds")


def _load_task(cfg: Config, out: str, task_id: str) -> Task:
    path = _dataset_path(out, task_id)
    ds = load_dataset(path)
    m = cfg.model
    return Task(task_id, ds.env_id, build_windows(ds, m["obs_steps"], m["horizon"]))


# ---------------------------------------------------------------------------
# Commands


def cmd_gen_data(args) -> int:
    cfg = _load(args)
    out = output_dir(args.out)
    os.makedirs(os.path.join(out, "data"), exist_ok=True)
    for task_id in cfg.task_ids:
        if task_id not in ENV_IDS:
            raise ConfigurationError(f"unknown task {task_id!r}; valid: {sorted(ENV_IDS)}")
        path = _dataset_path(out, task_id)
        if os.path.exists(path) and not args.overwrite:
            raise ConfigurationError(f"{path} exists; pass --overwrite to replace it")
        ds = generate_dataset(task_id, cfg.data["demos"], cfg.data["seed"],
                              noise=cfg.data["noise"])
        save_dataset(ds, path)
        print(f"{task_id}: {len(ds.trajectories)} trajectories -> {path}")
        print(f"  action range: {ds.stats.action_min} .. {ds.stats.action_max}")
    return 0


def _print_param_table(net: DenoiserNetwork) -> None:
    tp = count_parameters(net, "total")
    print(f"total parameters: {tp}")
    for tid in net.tasks:
        ap = count_parameters(net, "active-per-task", tid)
        print(f"active per task {tid}: {ap}")


def _metrics_logger(log: MetricsLog, run_id: str):
    def emit(rec):
        log.append(run_id, rec.epoch, loss=rec.loss, bc_loss=rec.bc_loss,
                   mi_per_layer=rec.mi_per_layer, success=rec.success)
    return emit


def cmd_train(args) -> int:
    cfg = _load(args)
    out = output_dir(args.out)
    os.makedirs(out, exist_ok=True)
    regime = args.regime
    plan = cfg.stage_plan("full-finetune" if regime == "fft" else regime)
    run_id = f"{regime}-seed{plan.seed}"
    log = MetricsLog(os.path.join(out, "metrics.jsonl"))
    emit = _metrics_logger(log, run_id)
    parent_path = None

    if regime == "multitask":
        net = DenoiserNetwork(cfg.model_config(), seed=plan.seed)
        tasks = TaskSet([_load_task(cfg, out, tid) for tid in cfg.task_ids])
        result = train_multitask(net, tasks, plan, log=emit)
        norm_stats = {t.task_id: t.windows.stats for t in tasks}
    else:
        if not args.from_ckpt:
            raise ConfigurationError(f"--from <checkpoint> is required for {regime}")
        new_task_id = cfg.stage["new_task"]
        if not new_task_id:
            raise ConfigurationError("stage.new_task must name the task to add")
        loaded = load_checkpoint(args.from_ckpt)
        net = loaded.net
        parent_path = args.from_ckpt
        norm_stats = dict(loaded.norm_stats)
        new_task = _load_task(cfg, out, new_task_id)
        norm_stats[new_task_id] = new_task.windows.stats
        if regime == "continual":
            seen = TaskSet([_load_task(cfg, out, tid) for tid in net.tasks])
            stage_out = train_continual(net, seen, new_task, plan, log=emit)
            result = stage_out.result
            for tid, ok in stage_out.preserved.items():
                print(f"preserved {tid}: {'yes' if ok else 'NO'}")
            if not all(stage_out.preserved.values()):
                raise AccountingError("a prior task's forward pass changed")
        elif regime == "transfer":
            result = train_transfer(net, new_task, plan, log=emit)
            print(f"trainable fraction: {result.trainable_fraction:.6f}")
        else:  # fft
            result = train_full_finetune(net, new_task, plan, log=emit)

    ckpt_path = args.ckpt_out or os.path.join(out, f"{regime}.ckpt")
    digest = save_checkpoint(net, ckpt_path, norm_stats=norm_stats,
                             usage=result.usage, stage=regime, parent=parent_path)
    _print_param_table(net)
    if result.evals:
        epoch, rates = result.evals[-1]
        for tid, rate in sorted(rates.items()):
            print(f"eval epoch {epoch} {tid}: {rate:.2f}")
    print(f"checkpoint: {ckpt_path} sha256={digest}")
    return 0


def cmd_eval(args) -> int:
    loaded = load_checkpoint(args.ckpt)
    net = loaded.net
    if args.task not in net.tasks:
        raise LookupError_(f"task {args.task!r} not in checkpoint; "
                           f"registered: {net.tasks}")
    if args.task not in loaded.norm_stats:
        raise FormatError(f"checkpoint lacks normalization stats for {args.task!r}")
    out = output_dir(args.out)
    os.makedirs(out, exist_ok=True)
    schedule = DiffusionSchedule(net.cfg.t_diff)
    stats = loaded.norm_stats[args.task]
    task = Task(args.task, args.env or args.task,
                _stub_windows(stats))
    result = evaluate_network(net, task, schedule, args.episodes, args.seed,
                              execute_steps=args.execute_steps)
    print(f"success rate over {args.episodes} episodes: {result.success_rate:.3f}")
    trace_path = os.path.join(out, f"eval-{args.task}.npz")
    np.savez(trace_path, *result.traces,
             successes=np.asarray(result.successes))
    print(f"traces: {trace_path}")
    if args.score_trace:
        traces = expert_score_trace(net, args.task, task.env_id, stats,
                                    episodes=args.episodes, seed=args.seed,
                                    execute_steps=args.execute_steps)
        table_path = os.path.join(out, f"score-trace-{args.task}.txt")
        with open(table_path, "w") as f:
            f.write(score_trace_table(traces))
        print(f"score trace: {table_path}")
    return 0


def _stub_windows(stats):
    """evaluate_network only needs the task's norm stats, not its windows."""
    from .data import WindowSet
    return WindowSet("eval", np.zeros((1, 1, 1)), np.zeros((1, 1, 1)), stats)


def cmd_report(args) -> int:
    out = output_dir(args.out)
    os.makedirs(out, exist_ok=True)
    if args.kind == "usage-map":
        loaded = load_checkpoint(args.ckpt)
        text = usage_map_table(loaded.usage)
        base = os.path.join(out, "usage-map")
        with open(base + ".txt", "w") as f:
            f.write(text)
        render_usage_map(loaded.usage, base + ".png")
    elif args.kind == "score-trace":
        loaded = load_checkpoint(args.ckpt)
        net = loaded.net
        if args.task not in net.tasks:
            raise LookupError_(f"task {args.task!r} not in checkpoint; "
                               f"registered: {net.tasks}")
        traces = expert_score_trace(net, args.task, args.env or args.task,
                                    loaded.norm_stats[args.task],
                                    episodes=args.episodes, seed=args.seed)
        base = os.path.join(out, f"score-trace-{args.task}")
        with open(base + ".txt", "w") as f:
            f.write(score_trace_table(traces))
        render_score_trace(traces, base + ".png")
    else:  # stage-table
        if not args.metrics:
            raise ConfigurationError("--metrics <metrics.jsonl> is required for stage-table")
        records = read_metrics(args.metrics)
        stages = []
        for rec in records:
            if rec.get("success"):
                stages.append({"stage": f"{rec['run_id']}@{rec['epoch']}",
                               "success": rec["success"]})
        text = stage_table(stages)
        base = os.path.join(out, "stage-table")
        with open(base + ".txt", "w") as f:
            f.write(text)
        render_stage_table(stages, base + ".png")
    print(f"report written under {out}")
    return 0


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="moepolicy",
        description="Sparse-MoE diffusion policy: data generation, training "
                    "regimes, evaluation, and reports.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="INI config file (defaults apply otherwise)")
        p.add_argument("--out", help=f"output dir (default ${OUTPUT_DIR_ENV} or ./runs)")
        p.add_argument("--set", action="append", metavar="SEC.KEY=VAL",
                       help="override a config value")

    p = sub.add_parser("gen-data", help="generate scripted-expert datasets")
    common(p)
    p.add_argument("--overwrite", action="store_true")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="run one training stage")
    common(p)
    p.add_argument("--regime", required=True,
                   choices=["multitask", "continual", "transfer", "fft"])
    p.add_argument("--from", dest="from_ckpt", metavar="CKPT",
                   help="parent checkpoint (continual/transfer/fft)")
    p.add_argument("--ckpt-out", help="checkpoint path (default <out>/<regime>.ckpt)")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="closed-loop evaluation of a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--task", required=True)
    p.add_argument("--env", help="environment id (defaults to the task id)")
    p.add_argument("--episodes", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--execute-steps", type=int, default=2)
    p.add_argument("--score-trace", action="store_true")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("report", help="emit usage-map / score-trace / stage-table")
    p.add_argument("--kind", required=True,
                   choices=["usage-map", "score-trace", "stage-table"])
    p.add_argument("--ckpt", help="checkpoint (usage-map, score-trace)")
    p.add_argument("--task", help="task id (score-trace)")
    p.add_argument("--env")
    p.add_argument("--episodes", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--metrics", help="metrics.jsonl (stage-table)")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_report)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    T.set_default_dtype(np.float32)  # training/eval precision; tests pin float64
    try:
        return args.fn(args)
    except Exception as exc:  # categorize, print, return nonzero
        for types, code, label in EXIT_CODES:
            if isinstance(exc, types):
                print(f"error[{label}]: {exc}", file=sys.stderr)
                return code
        print(f"error[internal]: {exc!r}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
