"""Tour of the sparse MoE layer: task routers, Top-K gating, usage
accounting, combination capacity, and what expert expansion does.

Run from the repo root:  python3 demos/01_routing_and_capacity.py
"""

import numpy as np

from moepolicy import tensor as T
from moepolicy.moe import MoELayer, UsageStats, combination_capacity, route

rng = T.new_rng(0)

# An MoE layer with 4 experts, each a 2-layer MLP over 16-wide tokens,
# gating the top 2 per token.
layer = MoELayer(layer_index=0, width=16, n_experts=4, top_k=2,
                 expert_hidden=32, rng=rng)
layer.register_router("reach", rng)
layer.register_router("push", rng)

x = T.Tensor(rng.standard_normal((6, 16)))

# Each task routes through its own gate. Scores are a softmax over experts;
# only the top-K survive, keeping their raw softmax values.
for task in ("reach", "push"):
    scores, mask = route(layer.router_for(task), x)
    print(f"{task}: first token scores {np.round(scores.data[0], 3)}")
    print(f"{task}: first token picks experts {np.nonzero(mask[0])[0]}")

# Forward evaluates exactly K experts per token -- check the meters.
stats = UsageStats()
for e in layer.experts:
    e.eval_count = 0
y = layer.forward("reach", x, stats=stats)
print("\noutput shape:", y.data.shape)
print("expert eval counts:", [e.eval_count for e in layer.experts],
      "-> total", sum(e.eval_count for e in layer.experts),
      f"(= {x.data.shape[0]} tokens x K={layer.top_k})")
print("hard usage row:", stats.snapshot()[("reach", 0)])

# How many distinct expert combinations can a stack of such layers express?
for L, K, N in [(4, 1, 2), (4, 2, 4), (8, 2, 8)]:
    print(f"L={L} K={K} N={N} layers -> {combination_capacity(L, K, N)} combinations")

# Expansion: freeze everything, append fresh experts, give the new task a
# router over the grown pool. Old routers keep their original width, so old
# tasks can never be steered into the new experts.
layer.expand(2, "stack", rng)
print("\nafter expansion:", layer.n_experts, "experts;",
      "old router addresses", layer.router_for("reach").n_addressable,
      "/ new router addresses", layer.router_for("stack").n_addressable)
print("frozen experts:", [e.frozen for e in layer.experts])
