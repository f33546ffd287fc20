import time, numpy as np
from moepolicy import tensor as T
T.set_default_dtype(np.float32)
from moepolicy.data import generate_dataset, build_windows
from moepolicy.diffusion import DenoiserNetwork, ModelConfig, DiffusionSchedule
from moepolicy.lifecycle import Task, TaskSet, StagePlan, train_multitask, evaluate_network

t0 = time.time()
cfg = ModelConfig(horizon=4)
sch = DiffusionSchedule(cfg.t_diff)
ds = generate_dataset("push", 200, seed=1)
task = Task("push", "push", build_windows(ds, cfg.obs_steps, cfg.horizon))
print("windows:", task.windows.obs.shape[0], flush=True)
net = DenoiserNetwork(cfg, seed=0)
plan = StagePlan(epochs=300, steps_per_epoch=25, batch_size=64, lr=3e-4, gamma=0.0,
                 seed=0, ema=0.995, cosine_lr=True)
def log(rec):
    if rec.epoch % 25 == 0:
        print(f"epoch {rec.epoch} bc {rec.bc_loss:.4f} t={time.time()-t0:.0f}s", flush=True)
    if rec.epoch % 50 == 0:
        r = evaluate_network(net, task, sch, episodes=20, seed=1000, execute_steps=2)
        print(f"  eval es=2: {r.success_rate}", flush=True)
train_multitask(net, TaskSet([task]), plan, log=log)
print(f"done t={time.time()-t0:.0f}s")
