import time, numpy as np
from moepolicy.data import generate_dataset, build_windows
from moepolicy.diffusion import DenoiserNetwork, ModelConfig, DiffusionSchedule
from moepolicy.lifecycle import (Task, TaskSet, StagePlan, train_multitask,
                                 train_transfer, usage_cosines, evaluate_network)

t0 = time.time()
cfg = ModelConfig(n_blocks=3, embed_dim=48, n_heads=4, n_experts=8, top_k=2,
                  expert_expansion=2, t_diff=16, encoder_hidden=96)
tasks = []
for env_id in ("reach", "push"):
    ds = generate_dataset(env_id, 100, seed=0)
    tasks.append(Task(env_id, env_id, build_windows(ds, cfg.obs_steps, cfg.horizon)))
net = DenoiserNetwork(cfg, seed=0)
plan = StagePlan(epochs=80, steps_per_epoch=25, batch_size=64, lr=3e-4, gamma=10.0,
                 eval_every=20, eval_episodes=20, execute_steps=4, seed=0)
def log(rec):
    msg = f"epoch {rec.epoch} bc {rec.bc_loss:.4f} mi {[round(v,3) for v in rec.mi_per_layer]}"
    if rec.success: msg += f" success {rec.success}"
    print(msg, f"t={time.time()-t0:.0f}s", flush=True)
res = train_multitask(net, TaskSet(tasks), plan, log=log)
print("cosines:", usage_cosines(res.usage), flush=True)
print("usage:", {k: np.round(v,3).tolist() for k,v in sorted(res.usage.items())}, flush=True)

# transfer pilot
ds = generate_dataset("push-then-reach", 100, seed=2)
comp = Task("push-then-reach", "push-then-reach", build_windows(ds, cfg.obs_steps, cfg.horizon))
tplan = StagePlan(regime="transfer", epochs=60, steps_per_epoch=25, batch_size=64,
                  lr=3e-3, eval_every=20, eval_episodes=20, execute_steps=4, seed=0)
tres = train_transfer(net, comp, tplan, log=log)
print("transfer fraction:", tres.trainable_fraction, flush=True)
print("transfer evals:", tres.evals, flush=True)

# scratch baseline, equal budget
scratch = DenoiserNetwork(cfg, seed=100)
splan = StagePlan(epochs=60, steps_per_epoch=25, batch_size=64, lr=3e-4,
                  eval_every=20, eval_episodes=20, execute_steps=4, seed=0)
sres = train_multitask(scratch, TaskSet([comp]), splan, log=log)
print("scratch evals:", sres.evals, flush=True)
print(f"done t={time.time()-t0:.0f}s")
