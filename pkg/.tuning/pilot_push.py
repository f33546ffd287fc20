import time, numpy as np
from moepolicy import tensor as T
T.set_default_dtype(np.float32)
from moepolicy.data import generate_dataset, build_windows
from moepolicy.diffusion import DenoiserNetwork, ModelConfig, DiffusionSchedule
from moepolicy.lifecycle import Task, TaskSet, StagePlan, train_multitask, evaluate_network

t0 = time.time()
cfg = ModelConfig()  # desk
sch = DiffusionSchedule(cfg.t_diff)
ds = generate_dataset("push", 200, seed=1)
task = Task("push", "push", build_windows(ds, cfg.obs_steps, cfg.horizon))
print("windows:", task.windows.obs.shape, flush=True)
net = DenoiserNetwork(cfg, seed=0)
plan = StagePlan(epochs=150, steps_per_epoch=25, batch_size=64, lr=3e-4, gamma=0.0, seed=0)
def log(rec):
    print(f"epoch {rec.epoch} bc {rec.bc_loss:.4f} t={time.time()-t0:.0f}s", flush=True)
    if rec.epoch % 25 == 0:
        for es in (1, 2, 4):
            r = evaluate_network(net, task, sch, episodes=10, seed=1000, execute_steps=es)
            print(f"  eval es={es}: {r.success_rate}", flush=True)
res = train_multitask(net, TaskSet([task]), plan, log=log)
print(f"done t={time.time()-t0:.0f}s")
