"""Task transfer by training only a router: the frozen expert pool already
contains the skills, a new gate just has to compose them.

Compares router-only transfer against training the same architecture from
scratch on an equal budget, and prints how tiny the trainable slice is.

Run from the repo root:  python3 demos/04_router_transfer.py
"""

import numpy as np

from moepolicy.data import build_windows, generate_dataset
from moepolicy.diffusion import DenoiserNetwork, DiffusionSchedule, ModelConfig
from moepolicy.lifecycle import (StagePlan, Task, TaskSet, evaluate_network,
                                 train_multitask, train_transfer)

cfg = ModelConfig(n_blocks=2, embed_dim=32, n_heads=2, n_experts=4, top_k=2,
                  expert_expansion=2, t_diff=8, encoder_hidden=64)
schedule = DiffusionSchedule(cfg.t_diff)


def load_task(env_id, demos, seed):
    ds = generate_dataset(env_id, demos, seed)
    return Task(env_id, env_id, build_windows(ds, cfg.obs_steps, cfg.horizon))


base = TaskSet([load_task("reach", 60, 0), load_task("push", 60, 1)])
composed = load_task("push-then-reach", 60, 2)

# Base training on the two primitive tasks. EMA of the weights smooths out
# the checkpoint the transfer stage will build on.
net = DenoiserNetwork(cfg, seed=0)
train_multitask(net, base, StagePlan(epochs=60, steps_per_epoch=20, batch_size=32,
                                     lr=3e-4, gamma=1.0, ema=0.99, cosine_lr=True))

# Transfer: freeze everything, register the composed task, train its router
# (one small matrix per layer) plus its task token.
budget = StagePlan(regime="transfer", epochs=60, steps_per_epoch=20,
                   batch_size=32, lr=3e-3, ema=0.99, cosine_lr=True)
res = train_transfer(net, composed, budget)
print(f"transfer trains {res.trainable_fraction:.2%} of the parameters:")
for name in res.trainable_names:
    print("   ", name)

# From-scratch baseline: identical architecture, same number of steps,
# but nothing to reuse.
scratch = DenoiserNetwork(cfg, seed=1)
train_multitask(scratch, TaskSet([composed]),
                StagePlan(epochs=20, steps_per_epoch=20, batch_size=32, lr=3e-4))

for label, model in [("router-only transfer", net), ("from scratch", scratch)]:
    rate = evaluate_network(model, composed, schedule,
                            episodes=15, seed=42).success_rate
    print(f"{label}: success {rate:.2f} on {composed.env_id}")
