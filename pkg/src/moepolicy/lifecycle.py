"""Training regimes over the MoE denoiser: joint multitask training,
continual learning by expert expansion with full freezing, router-only
task transfer, and a full-finetune baseline (which forgets, on purpose).

All regimes share one mini-batch loop; they differ only in which parameters
are left unfrozen and whether the expert pool grows first.
"""

from __future__ import annotations

import fnmatch
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .data import WindowSet
from .diffusion import (DenoiserNetwork, DiffusionSchedule, PredictionWindow,
                        RecedingHorizonPolicy, bc_diffusion_loss)
from .envs import EvalResult, evaluate, make_env
from .moe import ConfigurationError, UsageStats, mutual_information, total_loss


@dataclass
class Task:
    """One task: an id (also the router key), the environment it is scored
    in, and its training windows."""

    task_id: str
    env_id: str
    windows: WindowSet


class TaskSet:
    """Ordered task collection; ids must be unique and stay stable across
    lifecycle stages."""

    def __init__(self, tasks: Sequence[Task]):
        ids = [t.task_id for t in tasks]
        if len(set(ids)) != len(ids):
            raise ConfigurationError(f"duplicate task ids: {ids}")
        for t in tasks:
            if t.windows.obs.shape[0] == 0:
                raise ConfigurationError(f"task {t.task_id!r} has no training windows")
        self.tasks = list(tasks)

    def __iter__(self):
        return iter(self.tasks)

    def __len__(self):
        return len(self.tasks)

    @property
    def ids(self) -> List[str]:
        return [t.task_id for t in self.tasks]

    def get(self, task_id: str) -> Task:
        for t in self.tasks:
            if t.task_id == task_id:
                return t
        raise ConfigurationError(f"no task {task_id!r} in {self.ids}")


@dataclass
class StagePlan:
    """One training stage: regime, budget, and the freeze/expansion knobs."""

    regime: str = "multitask"   # multitask | continual | transfer | full-finetune
    epochs: int = 100
    steps_per_epoch: int = 25
    batch_size: int = 64
    lr: float = 1e-4
    gamma: float = 0.01
    seed: int = 0
    eval_every: int = 0         # 0 disables mid-training evaluation
    eval_episodes: int = 20
    eval_seed: int = 1000
    execute_steps: int = 2
    ema: float = 0.0            # EMA decay for evaluated/published weights; 0 disables
    cosine_lr: bool = False     # decay lr to 10% over the stage
    expand_count: int = 8       # continual: experts appended per layer
    new_top_k: Optional[int] = None
    tune_encoder: bool = False  # continual/transfer: also unfreeze the obs encoder

    REGIMES = ("multitask", "continual", "transfer", "full-finetune")

    def __post_init__(self):
        if self.regime not in self.REGIMES:
            raise ConfigurationError(f"regime {self.regime!r} not in {self.REGIMES}")
        if self.epochs < 0 or self.steps_per_epoch < 1 or self.batch_size < 1:
            raise ConfigurationError("epochs >= 0, steps_per_epoch/batch_size >= 1 required")
        if not 0.0 <= self.ema < 1.0:
            raise ConfigurationError(f"ema decay must be in [0, 1), got {self.ema}")


@dataclass
class EpochMetrics:
    epoch: int
    loss: float
    bc_loss: float
    mi_per_layer: List[float]
    success: Optional[Dict[str, float]] = None   # task id -> rate, when evaluated


@dataclass
class TrainResult:
    history: List[EpochMetrics]
    usage: Dict[Tuple[str, int], np.ndarray]     # final normalized hard-usage rows
    evals: List[Tuple[int, Dict[str, float]]]    # (epoch, per-task success)
    trainable_fraction: float
    trainable_names: List[str]

    def best_mean_success(self, top_n: int = 3) -> Dict[str, float]:
        """Per-task mean success over each task's own top_n evaluation points."""
        if not self.evals:
            raise ConfigurationError("no evaluations recorded; set eval_every > 0")
        out = {}
        for tid in self.evals[0][1]:
            scores = sorted((s[tid] for _, s in self.evals), reverse=True)
            out[tid] = float(np.mean(scores[:top_n]))
        return out


# ---------------------------------------------------------------------------
# Freeze masks


def freeze_all(net: DenoiserNetwork) -> None:
    for p in net.parameters():
        p.frozen = True


def unfreeze(net: DenoiserNetwork, patterns: Sequence[str]) -> List[str]:
    """Unfreeze every parameter whose name matches any glob pattern; returns
    the matched names (order of named_parameters)."""
    matched = []
    for name, p in net.named_parameters().items():
        if any(fnmatch.fnmatch(name, pat) for pat in patterns):
            p.frozen = False
            matched.append(name)
    return matched


def trainable_names(net: DenoiserNetwork) -> List[str]:
    return [name for name, p in net.named_parameters().items() if not p.frozen]


def trainable_fraction(net: DenoiserNetwork) -> float:
    named = net.named_parameters()
    total = sum(p.data.size for p in named.values())
    live = sum(p.data.size for p in named.values() if not p.frozen)
    return live / total


def transfer_patterns(task_id: str, tune_encoder: bool = False) -> List[str]:
    """Name patterns for router-only transfer: the new task's router at every
    layer plus its embedding token; optionally the observation encoder."""
    pats = [f"block*.moe.router.{task_id}", f"task_embed.{task_id}"]
    if tune_encoder:
        pats.append("obs_mlp.*")
    return pats


# ---------------------------------------------------------------------------
# Shared mini-batch loop


def _sample_batch(tasks: TaskSet, batch_size: int,
                  rng: np.random.Generator) -> Dict[str, Tuple[np.ndarray, np.ndarray]]:
    """Uniform task mixing: batch_size // J windows per task, drawn with
    replacement. Task order is fixed by the TaskSet, draws by the rng."""
    share = max(1, batch_size // len(tasks))
    batch = {}
    for t in tasks:
        idx = rng.integers(0, t.windows.obs.shape[0], size=share)
        batch[t.task_id] = (t.windows.obs[idx], t.windows.actions[idx])
    return batch


def evaluate_network(net: DenoiserNetwork, task: Task, schedule: DiffusionSchedule,
                     episodes: int, seed: int, execute_steps: int = 2) -> EvalResult:
    """Closed-loop success rate of the trained denoiser on one task's env."""
    window = PredictionWindow(net.cfg.obs_steps, net.cfg.horizon,
                              min(execute_steps, net.cfg.horizon))
    policy = RecedingHorizonPolicy(net, task.task_id, schedule, task.windows.stats,
                                   window=window, seed=seed)
    return evaluate(policy, task.env_id, episodes, seed)


def run_stage(net: DenoiserNetwork, tasks: TaskSet, plan: StagePlan,
              schedule: Optional[DiffusionSchedule] = None,
              log=None) -> TrainResult:
    """Run one training stage over whatever parameters are currently
    unfrozen. Regime-specific setup (expansion, freezing, router creation)
    happens in the train_* entry points; this is the common loop."""
    schedule = schedule or DiffusionSchedule(net.cfg.t_diff)
    for t in tasks:
        if t.task_id not in net.task_embeds:
            raise ConfigurationError(f"task {t.task_id!r} has no router; register it first")
    live = trainable_names(net)
    opt = T.Adam(net.parameters(), lr=plan.lr, allow_unused=True)
    rng = T.new_rng(plan.seed)
    stats = UsageStats()
    history: List[EpochMetrics] = []
    evals: List[Tuple[int, Dict[str, float]]] = []
    named = net.named_parameters()
    # EMA shadows of the trainable weights: evaluated and published instead of
    # the raw iterates, which oscillate too much for checkpoint selection
    shadow = ({n: named[n].data.copy() for n in live} if plan.ema > 0 else None)

    def swap_in_shadow():
        if shadow is None:
            return None
        saved = {n: named[n].data for n in shadow}
        for n, d in shadow.items():
            named[n].data = d
        return saved

    def swap_back(saved):
        if saved is not None:
            for n, d in saved.items():
                named[n].data = d

    def run_eval(epoch: int) -> Dict[str, float]:
        saved = swap_in_shadow()
        try:
            rates = {t.task_id: evaluate_network(net, t, schedule, plan.eval_episodes,
                                                 plan.eval_seed, plan.execute_steps).success_rate
                     for t in tasks}
        finally:
            swap_back(saved)
        evals.append((epoch, rates))
        return rates

    for epoch in range(1, plan.epochs + 1):
        if plan.cosine_lr:
            frac = (epoch - 1) / max(1, plan.epochs - 1)
            opt.lr = plan.lr * (0.1 + 0.9 * 0.5 * (1.0 + math.cos(math.pi * frac)))
        losses, bcs, mis = [], [], []
        for _ in range(plan.steps_per_epoch):
            T.clear_tape()
            opt.zero_grad()
            batch = _sample_batch(tasks, plan.batch_size, rng)
            usage: Dict[int, Dict[str, T.Tensor]] = {}
            bc = bc_diffusion_loss(net, batch, schedule, rng, stats=stats, usage_out=usage)
            mi_terms = [mutual_information(usage[layer]) for layer in sorted(usage)]
            loss = total_loss(bc, mi_terms, plan.gamma)
            T.backward(loss)
            opt.step()
            if shadow is not None:
                for n, s in shadow.items():
                    s *= plan.ema
                    s += (1.0 - plan.ema) * named[n].data
            losses.append(loss.item())
            bcs.append(bc.item())
            mis.append([m.item() for m in mi_terms])
        rec = EpochMetrics(epoch, float(np.mean(losses)), float(np.mean(bcs)),
                           list(np.mean(mis, axis=0)) if mis and mis[0] else [])
        if plan.eval_every and (epoch % plan.eval_every == 0 or epoch == plan.epochs):
            rec.success = run_eval(epoch)
        history.append(rec)
        if log is not None:
            log(rec)
    T.clear_tape()
    if shadow is not None:
        # publish the EMA weights as the stage's result
        for n, s in shadow.items():
            np.copyto(named[n].data, s.astype(named[n].data.dtype, copy=False))
    if plan.epochs == 0 and plan.eval_every:
        run_eval(0)
    usage_snap = stats.snapshot() if stats.counts else {}
    return TrainResult(history, usage_snap, evals, trainable_fraction(net), live)


# ---------------------------------------------------------------------------
# Regimes


def train_multitask(net: DenoiserNetwork, tasks: TaskSet, plan: StagePlan,
                    schedule: Optional[DiffusionSchedule] = None, log=None) -> TrainResult:
    """Joint behavior cloning over all tasks with the MI routing objective;
    every parameter trains. Routers are registered here if missing."""
    for t in tasks:
        if t.task_id not in net.task_embeds:
            net.register_task(t.task_id)
    for p in net.parameters():
        p.frozen = False
    return run_stage(net, tasks, plan, schedule, log=log)


@dataclass
class ContinualStageResult:
    task_id: str
    result: TrainResult
    preserved: Dict[str, bool]   # earlier task id -> forward pass bit-identical


def _probe_batch(task: Task, n: int, seed: int):
    rng = T.new_rng(seed)
    idx = rng.integers(0, task.windows.obs.shape[0], size=n)
    obs = task.windows.obs[idx]
    noisy = rng.standard_normal((n,) + task.windows.actions.shape[1:])
    t_idx = rng.integers(1, 1 + 1, size=n)  # step 1 suffices for an identity probe
    return obs, noisy, t_idx


def _forward_snapshot(net: DenoiserNetwork, task: Task, seed: int = 17) -> np.ndarray:
    obs, noisy, t_idx = _probe_batch(task, 8, seed)
    with T.no_grad():
        return net.forward(task.task_id, obs, noisy, t_idx).data.copy()


def train_continual(net: DenoiserNetwork, seen: TaskSet, new_task: Task,
                    plan: StagePlan, schedule: Optional[DiffusionSchedule] = None,
                    log=None) -> ContinualStageResult:
    """One continual stage: freeze the whole network, append plan.expand_count
    experts per layer, register the new task's router over the grown pool, and
    train only the new parts on the new task's data.

    Earlier tasks' routers cannot address the new experts (router widths are
    fixed at creation), and every pre-existing parameter is frozen, so prior
    forward passes are reproduced bit for bit — which is verified, not assumed.
    """
    before = {t.task_id: _forward_snapshot(net, t) for t in seen}
    freeze_all(net)
    net.expand_experts(plan.expand_count, new_task.task_id, new_top_k=plan.new_top_k)
    if plan.tune_encoder:
        unfreeze(net, ["obs_mlp.*"])
    result = run_stage(net, TaskSet([new_task]), plan, schedule, log=log)
    preserved = {t.task_id: bool(np.array_equal(before[t.task_id], _forward_snapshot(net, t)))
                 for t in seen}
    return ContinualStageResult(new_task.task_id, result, preserved)


def train_transfer(net: DenoiserNetwork, new_task: Task, plan: StagePlan,
                   schedule: Optional[DiffusionSchedule] = None, log=None) -> TrainResult:
    """Router-only transfer: freeze everything, register the new task (fresh
    router per layer over the existing frozen experts, plus its embedding
    token), and train just those. trainable_fraction in the result reports
    how little that is."""
    if new_task.task_id in net.task_embeds:
        raise ConfigurationError(f"task {new_task.task_id!r} already registered")
    freeze_all(net)
    net.register_task(new_task.task_id, top_k=plan.new_top_k)
    matched = unfreeze(net, transfer_patterns(new_task.task_id, plan.tune_encoder))
    assert matched, "transfer selector matched nothing"
    return run_stage(net, TaskSet([new_task]), plan, schedule, log=log)


def train_full_finetune(net: DenoiserNetwork, new_task: Task, plan: StagePlan,
                        schedule: Optional[DiffusionSchedule] = None,
                        log=None) -> TrainResult:
    """Baseline that trains every parameter on the new task only. Old tasks
    degrade; that is the point of the comparison."""
    if new_task.task_id not in net.task_embeds:
        net.register_task(new_task.task_id, top_k=plan.new_top_k)
    for p in net.parameters():
        p.frozen = False
    return run_stage(net, TaskSet([new_task]), plan, schedule, log=log)


# ---------------------------------------------------------------------------
# Expert-score probes


@dataclass
class ScoreTrace:
    """Per-control-step router scores at one layer, with the env phase label
    for each step and the episode outcome."""

    scores: np.ndarray   # (steps, n_experts) softmax rows
    phases: np.ndarray   # (steps,) int phase per control step
    success: bool


def expert_score_trace(net: DenoiserNetwork, task_id: str, env_id: str,
                       stats, episodes: int, seed: int,
                       schedule: Optional[DiffusionSchedule] = None,
                       layer: Optional[int] = None,
                       execute_steps: int = 2) -> List[ScoreTrace]:
    """Roll closed-loop episodes recording the router's softmax scores at one
    layer (default: the last) at the probing diffusion step, labeled with the
    environment phase at each control step."""
    schedule = schedule or DiffusionSchedule(net.cfg.t_diff)
    if layer is None:
        layer = net.cfg.n_blocks - 1
    if not (0 <= layer < net.cfg.n_blocks):
        raise ConfigurationError(f"layer {layer} out of range [0, {net.cfg.n_blocks})")
    window = PredictionWindow(net.cfg.obs_steps, net.cfg.horizon,
                              min(execute_steps, net.cfg.horizon))
    policy = RecedingHorizonPolicy(net, task_id, schedule, stats, window=window,
                                   seed=seed, probe_layer=layer)
    traces = []
    for ep in range(episodes):
        env = make_env(env_id, seed=seed * 100003 + ep)
        policy.reset()
        state = env._observe()
        phases = []
        success = False
        for _ in range(env.step_cap):
            phases.append(int(getattr(env, "phase", 1)))
            state, done, success = env.step(policy.act(state))
            if done:
                break
        traces.append(ScoreTrace(np.asarray(policy.score_trace), np.asarray(phases), success))
    return traces


def usage_cosines(usage: Dict[Tuple[str, int], np.ndarray]) -> Dict[int, float]:
    """Max pairwise cosine similarity between per-task usage rows, per layer.
    Low values mean tasks use disjoint experts."""
    layers: Dict[int, List[np.ndarray]] = {}
    for (task_id, layer), row in usage.items():
        layers.setdefault(layer, []).append(np.asarray(row, dtype=np.float64))
    out = {}
    for layer, rows in layers.items():
        worst = 0.0
        for i in range(len(rows)):
            for j in range(i + 1, len(rows)):
                a, b = rows[i], rows[j]
                width = max(a.size, b.size)
                a = np.pad(a, (0, width - a.size))
                b = np.pad(b, (0, width - b.size))
                denom = np.linalg.norm(a) * np.linalg.norm(b)
                worst = max(worst, float(a @ b / denom) if denom > 0 else 0.0)
        out[layer] = worst
    return out
