import time, numpy as np
from moepolicy import tensor as T
T.set_default_dtype(np.float32)
from moepolicy.data import generate_dataset, build_windows
from moepolicy.diffusion import DenoiserNetwork, ModelConfig, DiffusionSchedule
from moepolicy.lifecycle import Task, TaskSet, StagePlan, train_multitask

t0 = time.time()
cfg = ModelConfig()
tasks = []
for i, env_id in enumerate(("reach", "push", "push-then-reach")):
    ds = generate_dataset(env_id, 200, seed=10 + i)
    tasks.append(Task(env_id, env_id, build_windows(ds, cfg.obs_steps, cfg.horizon)))
print("windows:", {t.task_id: t.windows.obs.shape[0] for t in tasks}, flush=True)
net = DenoiserNetwork(cfg, seed=0)
plan = StagePlan(epochs=1200, steps_per_epoch=25, batch_size=63, lr=3e-4, gamma=0.01,
                 seed=0, ema=0.995, cosine_lr=True, eval_every=50, eval_episodes=20)
def log(rec):
    if rec.epoch % 25 == 0 or rec.success:
        line = f"epoch {rec.epoch} bc {rec.bc_loss:.4f} t={time.time()-t0:.0f}s"
        if rec.success: line += f" success {rec.success}"
        print(line, flush=True)
res = train_multitask(net, TaskSet(tasks), plan, log=log)
print("best3:", res.best_mean_success(3))
print(f"done t={time.time()-t0:.0f}s")
