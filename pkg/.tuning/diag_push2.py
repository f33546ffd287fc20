import time, numpy as np
from moepolicy import tensor as T
T.set_default_dtype(np.float32)
from moepolicy.data import generate_dataset, build_windows
from moepolicy.diffusion import (DenoiserNetwork, ModelConfig, DiffusionSchedule,
                                 RecedingHorizonPolicy, PredictionWindow)
from moepolicy.lifecycle import Task, TaskSet, StagePlan, train_multitask
from moepolicy.envs import make_env
from moepolicy.checkpoint import save_checkpoint

t0 = time.time()
cfg = ModelConfig()
sch = DiffusionSchedule(cfg.t_diff)
ds = generate_dataset("push", 200, seed=1)
task = Task("push", "push", build_windows(ds, cfg.obs_steps, cfg.horizon))
net = DenoiserNetwork(cfg, seed=0)
plan = StagePlan(epochs=400, steps_per_epoch=25, batch_size=64, lr=3e-4, gamma=0.0,
                 seed=0, ema=0.995, cosine_lr=True)
def log(rec):
    if rec.epoch % 50 == 0:
        print(f"epoch {rec.epoch} bc {rec.bc_loss:.4f} t={time.time()-t0:.0f}s", flush=True)
train_multitask(net, TaskSet([task]), plan, log=log)
save_checkpoint(net, "/root/pkg/.tuning/diag_push2.ckpt",
                norm_stats={"push": task.windows.stats}, stage="diag2")

window = PredictionWindow(cfg.obs_steps, cfg.horizon, 4)
mins = []
for ep in range(40):
    env = make_env("push", seed=1000*100003+ep)
    pol = RecedingHorizonPolicy(net, "push", sch, task.windows.stats, window=window, seed=77+ep)
    state = env._observe()
    dmin = np.linalg.norm(state[2:4]-state[4:6])
    for _ in range(200):
        state, done, ok = env.step(pol.act(state))
        dmin = min(dmin, np.linalg.norm(state[2:4]-state[4:6]))
        if done: break
    mins.append(dmin)
mins = np.asarray(mins)
for r in (0.05, 0.06, 0.08, 0.10, 0.12):
    print(f"success at radius {r}: {(mins < r).mean():.2f}")
print("min-d percentiles:", np.percentile(mins, [10,25,50,75,90]).round(3))
print(f"done t={time.time()-t0:.0f}s")
