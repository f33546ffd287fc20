"""Transformer denoiser with MoE feed-forward blocks, plus the diffusion
machinery around it: noise schedule, noise-prediction training loss, ancestral
sampler, and the receding-horizon control wrapper.

Token layout per element: [task, time, o observation tokens, h action tokens];
the output head reads the h action-token positions. All attention is full
(the action window is denoised jointly, no causal mask).
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import tensor as T
from .moe import ConfigurationError, LookupError_, MoELayer, UsageStats
from .tensor import Tensor
from .data import NormStats
from .envs import DataError


@dataclass
class PredictionWindow:
    """Observation history length, prediction horizon, and replan stride."""

    obs_steps: int = 2
    horizon: int = 4
    execute_steps: int = 1

    def __post_init__(self):
        if self.obs_steps < 1 or self.horizon < 1:
            raise ConfigurationError("obs_steps and horizon must be >= 1")
        if not (1 <= self.execute_steps <= self.horizon):
            raise ConfigurationError("execute_steps must be in [1, horizon]")


class DiffusionSchedule:
    """Squared-cosine cumulative-alpha schedule over T denoising steps.

    Step indices run 1..T; arrays are 0-based (index t-1 for step t)."""

    def __init__(self, t_diff: int = 50, s: float = 0.008):
        if t_diff < 1:
            raise ConfigurationError("t_diff must be >= 1")
        self.t_diff = t_diff
        grid = np.arange(t_diff + 1, dtype=np.float64) / t_diff
        f = np.cos((grid + s) / (1 + s) * math.pi / 2.0) ** 2
        abar = f / f[0]
        betas = np.clip(1.0 - abar[1:] / abar[:-1], 1e-8, 0.999)
        self.betas = betas
        self.alphas = 1.0 - betas
        self.alpha_bar = np.cumprod(self.alphas)
        assert (np.diff(self.betas) >= -1e-12).all()
        assert (np.diff(self.alpha_bar) < 0).all()

    def corrupt(self, actions: np.ndarray, t_idx: np.ndarray, eps: np.ndarray) -> np.ndarray:
        """Forward process: sqrt(abar_t) * a + sqrt(1 - abar_t) * eps."""
        ab = self.alpha_bar[t_idx - 1].reshape((-1,) + (1,) * (actions.ndim - 1))
        return np.sqrt(ab) * actions + np.sqrt(1.0 - ab) * eps

    def posterior_sigma(self, t: int) -> float:
        ab_prev = self.alpha_bar[t - 2] if t > 1 else 1.0
        ab = self.alpha_bar[t - 1]
        return math.sqrt((1.0 - ab_prev) / (1.0 - ab) * self.betas[t - 1])


@dataclass
class ModelConfig:
    n_blocks: int = 4
    embed_dim: int = 64
    n_heads: int = 4
    n_experts: int = 8
    top_k: int = 2
    expert_expansion: int = 4   # expert hidden width = expansion * embed_dim
    light: bool = False         # 16 experts, top-8, hidden width / 16
    t_diff: int = 16
    obs_steps: int = 2
    horizon: int = 4
    state_dim: int = 6
    action_dim: int = 2
    use_task_token: bool = True
    dense_ffn: bool = False     # task-conditioned dense baseline (no MoE)
    encoder_hidden: int = 128
    expert_hidden_override: Optional[int] = None

    def resolved(self) -> "ModelConfig":
        """Light mode trades expert width for expert count: 16 experts, top-8,
        each 1/16 the base hidden width."""
        if not self.light:
            return self
        cfg = ModelConfig(**self.to_dict())
        cfg.light = False
        cfg.n_experts = 16
        cfg.top_k = 8
        cfg.expert_hidden_override = max(1, self.expert_expansion * self.embed_dim // 16)
        return cfg

    @property
    def expert_hidden(self) -> int:
        if self.expert_hidden_override is not None:
            return self.expert_hidden_override
        return self.expert_expansion * self.embed_dim

    def to_dict(self) -> dict:
        return dict(self.__dict__)


class DenseFFN:
    """Ordinary transformer feed-forward sublayer (baseline mode)."""

    def __init__(self, layer_index: int, width: int, hidden: int, rng: np.random.Generator):
        pre = f"block{layer_index}.ffn"
        self.w1 = T.parameter(T.kaiming_uniform(rng, (width, hidden), width), f"{pre}.w1")
        self.b1 = T.parameter(np.zeros(hidden), f"{pre}.b1")
        self.w2 = T.parameter(T.kaiming_uniform(rng, (hidden, width), hidden), f"{pre}.w2")
        self.b2 = T.parameter(np.zeros(width), f"{pre}.b2")

    def forward(self, task_id, x, stats=None, usage_out=None):
        h = T.gelu(T.add(T.matmul(x, self.w1), self.b1))
        return T.add(T.matmul(h, self.w2), self.b2)

    def parameters(self):
        return [self.w1, self.b1, self.w2, self.b2]


class TransformerBlock:
    def __init__(self, index: int, cfg: ModelConfig, rng: np.random.Generator):
        m = cfg.embed_dim
        self.index = index
        self.n_heads = cfg.n_heads
        pre = f"block{index}"
        self.ln1_g = T.parameter(np.ones(m), f"{pre}.ln1.gain")
        self.ln1_b = T.parameter(np.zeros(m), f"{pre}.ln1.bias")
        self.ln2_g = T.parameter(np.ones(m), f"{pre}.ln2.gain")
        self.ln2_b = T.parameter(np.zeros(m), f"{pre}.ln2.bias")
        self.attn = {}
        for name in ("wq", "wk", "wv", "wo"):
            self.attn[name] = T.parameter(T.kaiming_uniform(rng, (m, m), m), f"{pre}.attn.{name}")
        self.attn_bo = T.parameter(np.zeros(m), f"{pre}.attn.bo")
        if cfg.dense_ffn:
            self.ffn = DenseFFN(index, m, cfg.expert_hidden, rng)
        else:
            self.ffn = MoELayer(index, m, cfg.n_experts, cfg.top_k, cfg.expert_hidden, rng)

    @property
    def moe(self) -> MoELayer:
        assert isinstance(self.ffn, MoELayer)
        return self.ffn

    def _attention(self, x: Tensor) -> Tensor:
        b, s, m = x.data.shape
        h = self.n_heads
        dh = m // h

        def split(t):
            t = T.reshape(t, (b, s, h, dh))
            return T.reshape(T.transpose(t, (0, 2, 1, 3)), (b * h, s, dh))

        q = split(T.matmul(x, self.attn["wq"]))
        k = split(T.matmul(x, self.attn["wk"]))
        v = split(T.matmul(x, self.attn["wv"]))
        att = T.softmax(T.scale(T.matmul(q, T.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(dh)))
        out = T.matmul(att, v)    # (b*h, s, dh)
        out = T.reshape(T.transpose(T.reshape(out, (b, h, s, dh)), (0, 2, 1, 3)), (b, s, m))
        return T.add(T.matmul(out, self.attn["wo"]), self.attn_bo)

    def forward(self, task_id: str, x: Tensor, stats=None, usage_out=None) -> Tensor:
        b, s, m = x.data.shape
        x = T.add(x, self._attention(T.layer_norm(x, self.ln1_g, self.ln1_b)))
        rows = T.reshape(T.layer_norm(x, self.ln2_g, self.ln2_b), (b * s, m))
        y = self.ffn.forward(task_id, rows, stats=stats, usage_out=usage_out)
        return T.add(x, T.reshape(y, (b, s, m)))

    def parameters(self) -> List[Tensor]:
        ps = [self.ln1_g, self.ln1_b, self.ln2_g, self.ln2_b,
              *self.attn.values(), self.attn_bo]
        ps.extend(self.ffn.parameters())
        return ps


class DenoiserNetwork:
    """Noise-prediction network over [task, time, obs..., action...] tokens."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        cfg = config.resolved()
        self._raw_config = config
        self.cfg = cfg
        rng = T.new_rng(seed)
        self.seed = seed
        m = cfg.embed_dim
        o, h = cfg.obs_steps, cfg.horizon
        self.n_tokens = (1 if cfg.use_task_token else 0) + 1 + o + h
        enc_in = o * cfg.state_dim
        self.obs_w1 = T.parameter(T.kaiming_uniform(rng, (enc_in, cfg.encoder_hidden), enc_in),
                                  "obs_mlp.w1")
        self.obs_b1 = T.parameter(np.zeros(cfg.encoder_hidden), "obs_mlp.b1")
        self.obs_w2 = T.parameter(
            T.kaiming_uniform(rng, (cfg.encoder_hidden, o * m), cfg.encoder_hidden), "obs_mlp.w2")
        self.obs_b2 = T.parameter(np.zeros(o * m), "obs_mlp.b2")
        self.time_embed = T.parameter(T.kaiming_uniform(rng, (cfg.t_diff, m), m), "time_embed")
        self.act_in_w = T.parameter(T.kaiming_uniform(rng, (cfg.action_dim, m), cfg.action_dim),
                                    "act_in.w")
        self.act_in_b = T.parameter(np.zeros(m), "act_in.b")
        self.pos_embed = T.parameter(0.02 * rng.standard_normal((self.n_tokens, m)), "pos_embed")
        self.blocks = [TransformerBlock(i, cfg, rng) for i in range(cfg.n_blocks)]
        self.ln_f_g = T.parameter(np.ones(m), "ln_f.gain")
        self.ln_f_b = T.parameter(np.zeros(m), "ln_f.bias")
        self.head_w = T.parameter(T.kaiming_uniform(rng, (m, cfg.action_dim), m), "head.w")
        self.head_b = T.parameter(np.zeros(cfg.action_dim), "head.b")
        self.task_embeds: Dict[str, Tensor] = {}
        self._task_rng_seed = seed + 1

    # -- task registry -------------------------------------------------

    @property
    def tasks(self) -> List[str]:
        return list(self.task_embeds)

    def register_task(self, task_id: str, top_k: Optional[int] = None) -> None:
        if task_id in self.task_embeds:
            raise ConfigurationError(f"task {task_id!r} already registered")
        rng = T.new_rng(self._task_rng_seed + 7919 * len(self.task_embeds))
        self.task_embeds[task_id] = T.parameter(
            0.02 * rng.standard_normal(self.cfg.embed_dim), f"task_embed.{task_id}")
        if not self.cfg.dense_ffn:
            for block in self.blocks:
                block.moe.register_router(task_id, rng, top_k=top_k)

    def expand_experts(self, count: int, new_task_id: str,
                       new_top_k: Optional[int] = None) -> None:
        """Continual-learning expansion: freeze all experts/routers, append
        `count` fresh experts per layer and register the new task's router."""
        if self.cfg.dense_ffn:
            raise ConfigurationError("cannot expand a dense-FFN baseline")
        if new_task_id in self.task_embeds:
            raise ConfigurationError(f"task {new_task_id!r} already registered")
        rng = T.new_rng(self._task_rng_seed + 7919 * len(self.task_embeds))
        self.task_embeds[new_task_id] = T.parameter(
            0.02 * rng.standard_normal(self.cfg.embed_dim), f"task_embed.{new_task_id}")
        for block in self.blocks:
            block.moe.expand(count, new_task_id, rng, new_top_k=new_top_k)

    # -- forward --------------------------------------------------------

    def forward(self, task_id: str, obs: np.ndarray, noisy_actions, t_idx: np.ndarray,
                stats: Optional[UsageStats] = None,
                usage_out: Optional[Dict[int, Dict[str, Tensor]]] = None) -> Tensor:
        """Predict the corruption noise for a batch of one task.

        obs: (b, o, state_dim) normalized states; noisy_actions: (b, h,
        action_dim); t_idx: (b,) diffusion steps in 1..T. `usage_out`
        collects per-layer soft usage rows under usage_out[layer][task]."""
        if task_id not in self.task_embeds:
            raise LookupError_(f"unknown task {task_id!r}; registered: {self.tasks}")
        cfg = self.cfg
        b = obs.shape[0]
        o, hzn, m = cfg.obs_steps, cfg.horizon, cfg.embed_dim
        if obs.shape != (b, o, cfg.state_dim):
            raise T.ShapeMismatchError(f"obs shape {obs.shape}, expected {(b, o, cfg.state_dim)}")
        flat = T.Tensor(obs.reshape(b, o * cfg.state_dim))
        enc = T.gelu(T.add(T.matmul(flat, self.obs_w1), self.obs_b1))
        obs_tok = T.reshape(T.add(T.matmul(enc, self.obs_w2), self.obs_b2), (b, o, m))
        na = noisy_actions if isinstance(noisy_actions, Tensor) else T.Tensor(noisy_actions)
        act_tok = T.reshape(
            T.add(T.matmul(T.reshape(na, (b * hzn, cfg.action_dim)), self.act_in_w),
                  self.act_in_b), (b, hzn, m))
        time_tok = T.reshape(T.index_rows(self.time_embed, np.asarray(t_idx) - 1), (b, 1, m))
        parts = []
        if cfg.use_task_token:
            parts.append(T.broadcast_to(T.reshape(self.task_embeds[task_id], (1, 1, m)),
                                        (b, 1, m)))
        parts.extend([time_tok, obs_tok, act_tok])
        x = T.add(T.concat(parts, axis=1), self.pos_embed)
        layer_usage: Optional[Dict[int, Tensor]] = {} if usage_out is not None else None
        for block in self.blocks:
            x = block.forward(task_id, x, stats=stats, usage_out=layer_usage)
        if usage_out is not None:
            for layer_idx, u in layer_usage.items():
                usage_out.setdefault(layer_idx, {})[task_id] = u
        s = self.n_tokens
        act_slice = T.getitem(T.layer_norm(x, self.ln_f_g, self.ln_f_b),
                              (slice(None), slice(s - hzn, s), slice(None)))
        return T.add(T.matmul(act_slice, self.head_w), self.head_b)

    # -- parameter walking ----------------------------------------------

    def named_parameters(self) -> Dict[str, Tensor]:
        ps: List[Tensor] = [self.obs_w1, self.obs_b1, self.obs_w2, self.obs_b2,
                            self.time_embed, self.act_in_w, self.act_in_b, self.pos_embed]
        for block in self.blocks:
            ps.extend(block.parameters())
        ps.extend([self.ln_f_g, self.ln_f_b, self.head_w, self.head_b])
        ps.extend(self.task_embeds.values())
        return {p.name: p for p in ps}

    def parameters(self) -> List[Tensor]:
        return list(self.named_parameters().values())


def count_parameters(net: DenoiserNetwork, mode: str = "total",
                     task_id: Optional[str] = None) -> int:
    """total: every parameter. active-per-task: trunk + this task's embedding
    and routers + K experts' worth of expert parameters per layer."""
    named = net.named_parameters()
    if mode == "total":
        return sum(p.data.size for p in named.values())
    if mode != "active-per-task":
        raise ConfigurationError(f"unknown mode {mode!r}")
    if task_id is None:
        task_id = net.tasks[0]
    if task_id not in net.task_embeds:
        raise LookupError_(f"unknown task {task_id!r}")
    total = 0
    for name, p in named.items():
        if name.startswith("task_embed."):
            if name == f"task_embed.{task_id}":
                total += p.data.size
        elif ".moe.router." in name or ".moe.expert" in name:
            continue  # counted per layer below
        else:
            total += p.data.size
    if not net.cfg.dense_ffn:
        for block in net.blocks:
            k = block.moe.router_for(task_id).top_k
            per_expert = sum(p.data.size for p in block.moe.experts[0].parameters())
            # router contribution is the K winning embedding columns, so the
            # active count is invariant in the total expert pool size
            total += k * per_expert + k * net.cfg.embed_dim
    return total


# ---------------------------------------------------------------------------
# Training loss


def bc_diffusion_loss(net: DenoiserNetwork, batch: Dict[str, Tuple[np.ndarray, np.ndarray]],
                      schedule: DiffusionSchedule, rng: np.random.Generator,
                      stats: Optional[UsageStats] = None,
                      usage_out: Optional[dict] = None) -> Tensor:
    """Noise-prediction behavior-cloning loss over a mixed mini-batch.

    `batch` maps task id -> (obs (b, o, sd), actions (b, h, ad) in [-1, 1]).
    Per element: t ~ U{1..T}, eps ~ N(0, I), corrupt, regress predicted eps.
    Returns the size-weighted mean over task groups."""
    if not batch:
        raise ConfigurationError("empty batch")
    total_n = sum(obs.shape[0] for obs, _ in batch.values())
    loss: Optional[Tensor] = None
    for task_id in sorted(batch):
        obs, actions = batch[task_id]
        if np.abs(actions).max() > 1.0 + 1e-6:
            raise DataError(f"actions for task {task_id!r} escape [-1, 1]")
        b = obs.shape[0]
        t_idx = rng.integers(1, schedule.t_diff + 1, size=b)
        eps = rng.standard_normal(actions.shape)
        noisy = schedule.corrupt(actions, t_idx, eps)
        pred = net.forward(task_id, obs, noisy, t_idx, stats=stats, usage_out=usage_out)
        term = T.scale(T.mse(pred, T.Tensor(eps)), b / total_n)
        loss = term if loss is None else T.add(loss, term)
    assert loss is not None
    return loss


# ---------------------------------------------------------------------------
# Sampling and control


def sample_actions(net, task_id: str, obs: np.ndarray, schedule: DiffusionSchedule,
                   rng: np.random.Generator, score_out: Optional[dict] = None,
                   probe_step: int = 5) -> np.ndarray:
    """Ancestral reverse diffusion of one action window, clamped to [-1, 1].

    obs: (o, state_dim) normalized. When `score_out` is given, per-layer mean
    router scores at diffusion step min(probe_step, T) are stored into it."""
    h = net.cfg.horizon
    ad = net.cfg.action_dim
    x = rng.standard_normal((1, h, ad))
    probe_t = min(probe_step, schedule.t_diff)
    with T.no_grad():
        for t in range(schedule.t_diff, 0, -1):
            usage = {} if (score_out is not None and t == probe_t) else None
            eps_hat = net.forward(task_id, obs[None], x, np.array([t]),
                                  usage_out=usage).data
            if usage is not None:
                for layer_idx, per_task in usage.items():
                    score_out[layer_idx] = per_task[task_id].data.copy()
            ab = schedule.alpha_bar[t - 1]
            alpha = schedule.alphas[t - 1]
            beta = schedule.betas[t - 1]
            x = (x - beta / math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(alpha)
            if t > 1:
                x = x + schedule.posterior_sigma(t) * rng.standard_normal(x.shape)
    return np.clip(x[0], -1.0, 1.0)


class RecedingHorizonPolicy:
    """Closed-loop policy: encode the last o states, denoise an h-step action
    window, execute `execute_steps` of it, replan."""

    def __init__(self, net: DenoiserNetwork, task_id: str, schedule: DiffusionSchedule,
                 norm_stats: NormStats, window: Optional[PredictionWindow] = None,
                 seed: int = 0, probe_layer: Optional[int] = None):
        self.net = net
        self.task_id = task_id
        self.schedule = schedule
        self.norm_stats = norm_stats
        self.window = window or PredictionWindow(net.cfg.obs_steps, net.cfg.horizon)
        if self.window.obs_steps != net.cfg.obs_steps:
            raise ConfigurationError("window.obs_steps inconsistent with network encoder")
        self.seed = seed
        self.probe_layer = probe_layer
        self.score_trace: List[np.ndarray] = []
        self._episode = -1
        self.reset()

    def reset(self) -> None:
        self._episode += 1
        self.rng = T.new_rng(self.seed * 1000003 + self._episode)
        self._history: deque = deque(maxlen=self.window.obs_steps)
        self._queue: List[np.ndarray] = []
        self._current_scores: Optional[np.ndarray] = None
        self.score_trace = []

    def act(self, state: np.ndarray) -> np.ndarray:
        s = self.norm_stats.normalize_states(np.asarray(state, dtype=np.float64))
        if not self._history:
            for _ in range(self.window.obs_steps):
                self._history.append(s)
        else:
            self._history.append(s)
        if not self._queue:
            obs = np.stack(self._history)
            score_out: Optional[dict] = {} if self.probe_layer is not None else None
            plan = sample_actions(self.net, self.task_id, obs, self.schedule, self.rng,
                                  score_out=score_out)
            if score_out is not None:
                self._current_scores = score_out[self.probe_layer]
            self._queue = list(plan[: self.window.execute_steps])
        if self.probe_layer is not None and self._current_scores is not None:
            self.score_trace.append(self._current_scores.copy())
        return self.norm_stats.denormalize_actions(self._queue.pop(0))


def receding_horizon_control(policy: RecedingHorizonPolicy, env,
                             step_cap: Optional[int] = None) -> Tuple[np.ndarray, bool]:
    """Roll `policy` in `env` until success or the step cap; returns the state
    trace and the success flag."""
    policy.reset()
    cap = step_cap if step_cap is not None else env.step_cap
    state = env._observe()
    trace = [state.copy()]
    success = False
    for i in range(cap):
        try:
            state, done, success = env.step(policy.act(state))
        except Exception as exc:
            raise RuntimeError(f"env step failed at step {i}") from exc
        trace.append(state.copy())
        if done:
            break
    return np.asarray(trace), success
