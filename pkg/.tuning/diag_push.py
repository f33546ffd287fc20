import time, numpy as np
from moepolicy import tensor as T
T.set_default_dtype(np.float32)
from moepolicy.data import generate_dataset, build_windows
from moepolicy.diffusion import (DenoiserNetwork, ModelConfig, DiffusionSchedule,
                                 RecedingHorizonPolicy, PredictionWindow, sample_actions)
from moepolicy.lifecycle import Task, TaskSet, StagePlan, train_multitask
from moepolicy.envs import make_env
from moepolicy.checkpoint import save_checkpoint

t0 = time.time()
cfg = ModelConfig()
sch = DiffusionSchedule(cfg.t_diff)
ds = generate_dataset("push", 200, seed=1)
task = Task("push", "push", build_windows(ds, cfg.obs_steps, cfg.horizon))
net = DenoiserNetwork(cfg, seed=0)
plan = StagePlan(epochs=80, steps_per_epoch=25, batch_size=64, lr=3e-4, gamma=0.0, seed=0)
def log(rec):
    if rec.epoch % 10 == 0:
        print(f"epoch {rec.epoch} bc {rec.bc_loss:.4f} t={time.time()-t0:.0f}s", flush=True)
train_multitask(net, TaskSet([task]), plan, log=log)
save_checkpoint(net, "/root/pkg/.tuning/diag_push.ckpt", norm_stats={"push": task.windows.stats}, stage="diag")

# offline: predict action windows from demo observations, compare to demo actions
rng = np.random.default_rng(7)
idx = rng.integers(0, task.windows.obs.shape[0], size=64)
errs, firsts = [], []
for i in idx:
    obs = task.windows.obs[i]
    plan_a = sample_actions(net, "push", obs, sch, T.new_rng(int(i)))
    errs.append(np.abs(plan_a - task.windows.actions[i]).mean())
    firsts.append((plan_a[0], task.windows.actions[i][0]))
print("offline mean |err| over window:", np.mean(errs), flush=True)
pa = np.array([f[0] for f in firsts]); ta = np.array([f[1] for f in firsts])
print("first-action pred norm mean:", np.linalg.norm(pa, axis=1).mean(),
      "demo norm mean:", np.linalg.norm(ta, axis=1).mean())
print("first-action cos:", (np.einsum('ij,ij->i', pa, ta) /
      np.maximum(np.linalg.norm(pa,axis=1)*np.linalg.norm(ta,axis=1),1e-9)).mean())

# rollout geometry
window = PredictionWindow(cfg.obs_steps, cfg.horizon, 1)
for ep in range(4):
    env = make_env("push", seed=1000 * 100003 + ep)
    pol = RecedingHorizonPolicy(net, "push", sch, task.windows.stats, window=window, seed=99+ep)
    state = env._observe()
    ds_ao, ds_ot = [], []
    for _ in range(200):
        state, done, succ = env.step(pol.act(state))
        ds_ao.append(np.linalg.norm(state[0:2]-state[2:4]))
        ds_ot.append(np.linalg.norm(state[2:4]-state[4:6]))
        if done: break
    print(f"ep {ep}: steps {env.steps} success {succ} "
          f"agent-obj d: start {ds_ao[0]:.2f} min {min(ds_ao):.2f} end {ds_ao[-1]:.2f} | "
          f"obj-target d: start {ds_ot[0]:.2f} min {min(ds_ot):.2f} end {ds_ot[-1]:.2f}", flush=True)
print(f"done t={time.time()-t0:.0f}s")
