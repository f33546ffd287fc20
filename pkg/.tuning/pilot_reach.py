import time, numpy as np
from moepolicy import tensor as T
from moepolicy.data import generate_dataset, build_windows
from moepolicy.diffusion import DenoiserNetwork, ModelConfig, DiffusionSchedule
from moepolicy.lifecycle import Task, TaskSet, StagePlan, train_multitask

t0 = time.time()
cfg = ModelConfig()  # desk: N=4 M=64 L=8 K=2 T=16
ds = generate_dataset("reach", 200, seed=0)
task = Task("reach", "reach", build_windows(ds, cfg.obs_steps, cfg.horizon))
print("windows:", task.windows.obs.shape, f"gen {time.time()-t0:.1f}s", flush=True)
net = DenoiserNetwork(cfg, seed=0)
plan = StagePlan(epochs=100, steps_per_epoch=25, batch_size=64, lr=1e-4, gamma=0.0,
                 eval_every=10, eval_episodes=20, execute_steps=4, seed=0)
def log(rec):
    msg = f"epoch {rec.epoch} bc {rec.bc_loss:.4f}"
    if rec.success: msg += f" success {rec.success}"
    print(msg, f"t={time.time()-t0:.0f}s", flush=True)
res = train_multitask(net, TaskSet([task]), plan, log=log)
print("evals:", res.evals)
