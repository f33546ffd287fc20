"""Train the MoE diffusion policy jointly on two 2D tasks and watch the
routing specialize.

Small budget on purpose -- this is a guided walkthrough, not a benchmark.
Expect a couple of minutes on one CPU core.

Run from the repo root:  python3 demos/02_multitask_training.py
"""

import numpy as np

from moepolicy.data import build_windows, generate_dataset
from moepolicy.diffusion import DenoiserNetwork, ModelConfig, count_parameters
from moepolicy.lifecycle import StagePlan, Task, TaskSet, train_multitask, usage_cosines
from moepolicy.reports import render_usage_map, usage_map_table

# A slimmed-down model so the demo stays snappy: 2 blocks, 32-wide,
# 4 experts with top-2 gating, 8 diffusion steps.
cfg = ModelConfig(n_blocks=2, embed_dim=32, n_heads=2, n_experts=4, top_k=2,
                  expert_expansion=2, t_diff=8, encoder_hidden=64)

tasks = []
for env_id in ("reach", "push"):
    ds = generate_dataset(env_id, n=40, seed=0)
    tasks.append(Task(env_id, env_id, build_windows(ds, cfg.obs_steps, cfg.horizon)))
    print(f"{env_id}: {len(ds.trajectories)} demos ->",
          tasks[-1].windows.obs.shape[0], "training windows")

net = DenoiserNetwork(cfg, seed=0)
print("total params:", count_parameters(net, "total"))

# gamma weights the mutual-information bonus that pushes tasks onto
# disjoint experts; crank it up and the usage rows separate.
plan = StagePlan(epochs=30, steps_per_epoch=20, batch_size=32, lr=3e-4,
                 gamma=1.0, eval_every=10, eval_episodes=10, execute_steps=4)

res = train_multitask(net, TaskSet(tasks), plan,
                      log=lambda r: print(f"epoch {r.epoch:3d}  bc {r.bc_loss:.4f}"
                                          f"  mi {[round(v, 3) for v in r.mi_per_layer]}"
                                          + (f"  success {r.success}" if r.success else "")))

print("\nfinal expert usage (rows sum to 1):")
print(usage_map_table(res.usage))
print("max pairwise usage-cosine per layer:", usage_cosines(res.usage))
render_usage_map(res.usage, "demo_usage_map.png")
print("heatmap written to demo_usage_map.png")
