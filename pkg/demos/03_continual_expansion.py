"""Continual learning without forgetting: freeze the trained network, bolt
on fresh experts, and train only the new task's parts.

The punchline is exactness -- old-task outputs are reproduced bit for bit,
not approximately, because nothing they depend on can move.

Run from the repo root:  python3 demos/03_continual_expansion.py
"""

import numpy as np

from moepolicy.data import build_windows, generate_dataset
from moepolicy.diffusion import DenoiserNetwork, ModelConfig, count_parameters
from moepolicy.lifecycle import (StagePlan, Task, TaskSet, train_continual,
                                 train_multitask)

cfg = ModelConfig(n_blocks=2, embed_dim=32, n_heads=2, n_experts=4, top_k=2,
                  expert_expansion=2, t_diff=8, encoder_hidden=64)


def load_task(env_id, demos, seed):
    ds = generate_dataset(env_id, demos, seed)
    return Task(env_id, env_id, build_windows(ds, cfg.obs_steps, cfg.horizon))


base = TaskSet([load_task("reach", 30, 0), load_task("push", 30, 1)])
composed = load_task("push-then-reach", 20, 2)

net = DenoiserNetwork(cfg, seed=0)
plan = StagePlan(epochs=15, steps_per_epoch=20, batch_size=32, lr=3e-4, gamma=0.1)
train_multitask(net, base, plan)

print("after base training:")
print("  total params:", count_parameters(net, "total"))
print("  active per task (reach):", count_parameters(net, "active-per-task", "reach"))

# Stage 2: add the composed task. Two fresh experts per layer, everything
# pre-existing frozen. Old routers physically cannot select the new experts.
stage = train_continual(net, base, composed,
                        StagePlan(regime="continual", epochs=15, steps_per_epoch=20,
                                  batch_size=32, lr=3e-4, expand_count=2))

print("\nafter the continual stage:")
print("  total params:", count_parameters(net, "total"), "(grew)")
print("  active per task (reach):", count_parameters(net, "active-per-task", "reach"),
      "(unchanged)")
print("  experts per layer:", net.blocks[0].moe.n_experts)
print("  old-task forwards bit-identical:", stage.preserved)

# The new router sees the whole pool; the old ones kept their width.
moe = net.blocks[0].moe
for tid in net.tasks:
    print(f"  router[{tid}] addresses {moe.router_for(tid).n_addressable} experts")
