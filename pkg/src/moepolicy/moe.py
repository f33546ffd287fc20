"""Sparse mixture-of-experts layer with task-specific routers.

Each layer keeps an append-only list of expert MLPs and one router per task.
Routing scores a token against the router's expert-embedding matrix, keeps
the Top-K softmax scores as gates (no renormalization), and evaluates only
the selected experts. Selection statistics back both the differentiable
mutual-information objective and the frequency reports.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Mapping, Optional, Tuple

import numpy as np

from . import tensor as T
from .tensor import Tensor


class ConfigurationError(ValueError):
    pass


class LookupError_(KeyError):
    """Unknown task id for a router registry."""


class AccountingError(RuntimeError):
    """Usage statistics violate their normalization contract."""


class Expert:
    """Two-layer MLP expert: gelu(x W1 + b1) W2 + b2."""

    def __init__(self, index: int, width: int, hidden: int, rng: np.random.Generator,
                 name_prefix: str, stage: int = 0):
        self.index = index
        self.stage = stage
        self.eval_count = 0  # tokens dispatched to this expert (instrumentation)
        self.w1 = T.parameter(T.kaiming_uniform(rng, (width, hidden), width), f"{name_prefix}.w1")
        self.b1 = T.parameter(np.zeros(hidden), f"{name_prefix}.b1")
        self.w2 = T.parameter(T.kaiming_uniform(rng, (hidden, width), hidden), f"{name_prefix}.w2")
        self.b2 = T.parameter(np.zeros(width), f"{name_prefix}.b2")

    def __call__(self, x: Tensor) -> Tensor:
        self.eval_count += x.data.shape[0]
        h = T.gelu(T.add(T.matmul(x, self.w1), self.b1))
        return T.add(T.matmul(h, self.w2), self.b2)

    def parameters(self) -> List[Tensor]:
        return [self.w1, self.b1, self.w2, self.b2]

    @property
    def frozen(self) -> bool:
        return all(p.frozen for p in self.parameters())

    def freeze(self, flag: bool = True) -> None:
        for p in self.parameters():
            p.frozen = flag


class Router:
    """Task-specific expert-embedding matrix. Its width is fixed at creation:
    a router can never address experts appended after it."""

    def __init__(self, task_id: str, layer_index: int, width: int, n_experts: int,
                 top_k: int, rng: np.random.Generator):
        if not (1 <= top_k <= n_experts):
            raise ConfigurationError(f"top_k={top_k} out of range for {n_experts} experts")
        self.task_id = task_id
        self.layer_index = layer_index
        self.top_k = top_k
        self.n_addressable = n_experts
        self.weight = T.parameter(
            T.kaiming_uniform(rng, (width, n_experts), width),
            f"block{layer_index}.moe.router.{task_id}",
        )

    @property
    def frozen(self) -> bool:
        return self.weight.frozen

    def freeze(self, flag: bool = True) -> None:
        self.weight.frozen = flag


def top_k_mask(scores: np.ndarray, k: int) -> np.ndarray:
    """Boolean mask of the K largest entries per row; ties break to the lowest index."""
    order = np.argsort(-scores, axis=-1, kind="stable")
    mask = np.zeros(scores.shape, dtype=bool)
    np.put_along_axis(mask, order[..., :k], True, axis=-1)
    return mask


def route(router: Router, x: Tensor) -> Tuple[Tensor, np.ndarray]:
    """Softmax scores over the router's experts plus the Top-K selection mask.

    Returns (scores, mask) where scores has shape (rows, L_j). Gate values for
    the selected experts are the raw softmax scores; non-selected gates are 0.
    """
    if x.data.shape[-1] != router.weight.data.shape[0]:
        raise T.ShapeMismatchError(
            f"route: token width {x.data.shape[-1]} != router width {router.weight.data.shape[0]}"
        )
    scores = T.softmax(T.matmul(x, router.weight), axis=-1)
    mask = top_k_mask(scores.data, router.top_k)
    return scores, mask


@dataclass
class UsageStats:
    """Selection-count accumulators per (task, layer, expert).

    Hard counts come from Top-K masks and back the frequency reports; the
    differentiable soft usage (batch-mean router probabilities) lives on the
    tape during training and is snapshotted here only as plain numbers.
    """

    counts: Dict[Tuple[str, int], np.ndarray] = field(default_factory=dict)
    tokens: Dict[Tuple[str, int], int] = field(default_factory=dict)

    def record(self, task_id: str, layer_index: int, mask: np.ndarray) -> None:
        key = (task_id, layer_index)
        col = mask.sum(axis=0).astype(np.int64)
        if key in self.counts:
            prev = self.counts[key]
            if len(col) > len(prev):  # layer expanded since last record
                prev = np.concatenate([prev, np.zeros(len(col) - len(prev), dtype=np.int64)])
            col_full = np.zeros_like(prev)
            col_full[: len(col)] = col
            self.counts[key] = prev + col_full
        else:
            self.counts[key] = col
        self.tokens[key] = self.tokens.get(key, 0) + mask.shape[0]

    def merge(self, other: "UsageStats") -> None:
        for key, col in other.counts.items():
            self.counts[key] = self.counts.get(key, np.zeros_like(col)) + col
            self.tokens[key] = self.tokens.get(key, 0) + other.tokens[key]

    def snapshot(self) -> Dict[Tuple[str, int], np.ndarray]:
        """Normalized selection frequencies; each (task, layer) row sums to 1."""
        if not self.counts:
            raise AccountingError("no usage recorded; run an evaluation pass with accounting on")
        out = {}
        for key, col in self.counts.items():
            total = col.sum()
            if total == 0:
                raise AccountingError(f"zero selections recorded for {key}")
            out[key] = col / total
        return out


class MoELayer:
    """Ordered expert list plus a per-task router registry."""

    def __init__(self, layer_index: int, width: int, n_experts: int, top_k: int,
                 expert_hidden: int, rng: np.random.Generator):
        if not (1 <= top_k <= n_experts):
            raise ConfigurationError(f"top_k={top_k} must be in [1, {n_experts}]")
        self.index = layer_index
        self.width = width
        self.top_k = top_k
        self.expert_hidden = expert_hidden
        self.experts: List[Expert] = [
            Expert(l, width, expert_hidden, rng, f"block{layer_index}.moe.expert{l}")
            for l in range(n_experts)
        ]
        self.routers: Dict[str, Router] = {}

    @property
    def n_experts(self) -> int:
        return len(self.experts)

    def register_router(self, task_id: str, rng: np.random.Generator,
                        top_k: Optional[int] = None) -> Router:
        if task_id in self.routers:
            raise ConfigurationError(f"router for task {task_id!r} already registered")
        r = Router(task_id, self.index, self.width, self.n_experts,
                   top_k if top_k is not None else self.top_k, rng)
        self.routers[task_id] = r
        return r

    def router_for(self, task_id: str) -> Router:
        try:
            return self.routers[task_id]
        except KeyError:
            raise LookupError_(
                f"no router for task {task_id!r}; registered: {sorted(self.routers)}"
            ) from None

    def forward(self, task_id: str, x: Tensor, stats: Optional[UsageStats] = None,
                usage_out: Optional[dict] = None) -> Tensor:
        """y = sum over selected experts of gate * expert(x), rows (tokens) x width.

        Only the Top-K experts per token are evaluated. When `usage_out` is
        given, the differentiable batch-mean router distribution is stored
        under this layer's index for the MI objective.
        """
        router = self.router_for(task_id)
        scores, mask = route(router, x)
        if stats is not None:
            stats.record(task_id, self.index, mask)
        if usage_out is not None:
            usage_out[self.index] = T.t_mean(scores, axis=0)
        n_rows = x.data.shape[0]
        y: Optional[Tensor] = None
        for l in range(router.n_addressable):
            idx = np.nonzero(mask[:, l])[0]
            if idx.size == 0:
                continue
            xl = T.index_rows(x, idx)
            gate = T.getitem(T.index_rows(scores, idx), (slice(None), slice(l, l + 1)))
            contrib = T.scatter_rows(T.mul(gate, self.experts[l](xl)), idx, n_rows)
            y = contrib if y is None else T.add(y, contrib)
        assert y is not None
        return y

    def expand(self, count: int, new_task_id: str, rng: np.random.Generator,
               new_top_k: Optional[int] = None) -> Router:
        """Freeze everything, append `count` fresh experts (count=0 allowed:
        freeze-only), and register a router for the new task over all experts."""
        if count < 0:
            raise ConfigurationError(f"expansion count must be >= 0, got {count}")
        for e in self.experts:
            e.freeze()
        for r in self.routers.values():
            r.freeze()
        stage = max(e.stage for e in self.experts) + 1
        base = len(self.experts)
        for i in range(count):
            self.experts.append(
                Expert(base + i, self.width, self.expert_hidden, rng,
                       f"block{self.index}.moe.expert{base + i}", stage=stage)
            )
        return self.register_router(new_task_id, rng, top_k=new_top_k)

    def parameters(self) -> Iterator[Tensor]:
        for e in self.experts:
            yield from e.parameters()
        for r in self.routers.values():
            yield r.weight


# ---------------------------------------------------------------------------
# Mutual information objective


def mutual_information(usage_rows: Mapping[str, Tensor], tol: float = 1e-4) -> Tensor:
    """I(T, E) over a batch's soft-usage rows, one length-L row per task.

    p(T_j) = 1/J over the tasks present, p(T_j, E_l) = u[j][l]/J, and
    p(E_l) = mean_j u[j][l]. Differentiable through the usage rows.
    """
    tasks = sorted(usage_rows)
    J = len(tasks)
    rows = [usage_rows[j] for j in tasks]
    for j, u in zip(tasks, rows):
        s = float(u.data.sum())
        if abs(s - 1.0) > tol:
            raise AccountingError(f"usage row for task {j!r} sums to {s}, expected 1")
    if J == 1:
        return T.scale(T.t_sum(rows[0]), 0.0)  # I == 0, kept on-tape for uniform plumbing
    stacked = T.concat([T.reshape(u, (1, -1)) for u in rows], axis=0)  # (J, L)
    p_e = T.t_mean(stacked, axis=0, keepdims=True)  # (1, L)
    eps = Tensor(np.full((1,), 1e-12))
    log_ratio = T.sub(T.log(T.add(stacked, eps)), T.log(T.add(p_e, eps)))
    return T.scale(T.t_sum(T.mul(stacked, log_ratio)), 1.0 / J)


def total_loss(bc_loss: Tensor, mi_per_layer: List[Tensor], gamma: float) -> Tensor:
    """bc_loss - gamma * sum of per-layer MI terms."""
    if gamma < 0:
        raise ConfigurationError(f"gamma must be >= 0, got {gamma}")
    out = bc_loss
    for mi in mi_per_layer:
        out = T.sub(out, T.scale(mi, gamma))
    return out


def combination_capacity(n_experts: int, top_k: int, n_layers: int) -> int:
    """binomial(L, K)^N — distinct Top-K expert combinations across N layers."""
    if not (1 <= top_k <= n_experts):
        raise ConfigurationError(f"need 1 <= K <= L, got K={top_k}, L={n_experts}")
    if n_layers < 1:
        raise ConfigurationError(f"need N >= 1, got {n_layers}")
    return math.comb(n_experts, top_k) ** n_layers
