"""Demonstration dataset generation, normalization stats, and serialization.

Binary layout (little-endian throughout):

  magic b"MPDS" | u32 format version | u32 header length | JSON header
  then per trajectory:
    u32 n_states  | n_states * STATE_DIM  float32
    u32 n_actions | n_actions * ACTION_DIM float32
    u8 success

The JSON header is the manifest: env id, generator seed, trajectory count,
expert noise, normalization stats and an env-parameter hash. A plain-text
export (one JSON object per trajectory, one per line) is provided for
debugging.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from typing import Dict, List

import numpy as np

from .envs import ACTION_DIM, STATE_DIM, STEP_CAP, DataError, Trajectory, make_env, scripted_expert

MAGIC = b"MPDS"
FORMAT_VERSION = 1


class FormatError(ValueError):
    """Corrupt or wrong-version dataset file."""


@dataclass
class NormStats:
    """Per-task normalization: actions map to [-1, 1] per dim, states standardize."""

    action_min: np.ndarray
    action_max: np.ndarray
    state_mean: np.ndarray
    state_std: np.ndarray

    def normalize_actions(self, a: np.ndarray) -> np.ndarray:
        span = np.maximum(self.action_max - self.action_min, 1e-8)
        return 2.0 * (a - self.action_min) / span - 1.0

    def denormalize_actions(self, a: np.ndarray) -> np.ndarray:
        span = np.maximum(self.action_max - self.action_min, 1e-8)
        return (a + 1.0) / 2.0 * span + self.action_min

    def normalize_states(self, s: np.ndarray) -> np.ndarray:
        return (s - self.state_mean) / np.maximum(self.state_std, 1e-8)

    def to_dict(self) -> dict:
        return {
            "action_min": self.action_min.tolist(),
            "action_max": self.action_max.tolist(),
            "state_mean": self.state_mean.tolist(),
            "state_std": self.state_std.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(*(np.asarray(d[k], dtype=np.float64)
                     for k in ("action_min", "action_max", "state_mean", "state_std")))


def compute_norm_stats(trajectories: List[Trajectory]) -> NormStats:
    actions = np.concatenate([t.actions for t in trajectories]).astype(np.float64)
    states = np.concatenate([t.states for t in trajectories]).astype(np.float64)
    return NormStats(
        action_min=actions.min(axis=0),
        action_max=actions.max(axis=0),
        state_mean=states.mean(axis=0),
        state_std=states.std(axis=0),
    )


def env_param_hash(env_id: str) -> str:
    params = {"env_id": env_id, "state_dim": STATE_DIM, "action_dim": ACTION_DIM,
              "step_cap": STEP_CAP}
    return hashlib.sha256(json.dumps(params, sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class Dataset:
    env_id: str
    seed: int
    noise: float
    trajectories: List[Trajectory]
    stats: NormStats = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.stats is None:
            self.stats = compute_norm_stats(self.trajectories)

    def manifest(self) -> dict:
        return {
            "env_id": self.env_id,
            "seed": self.seed,
            "noise": self.noise,
            "count": len(self.trajectories),
            "norm_stats": self.stats.to_dict(),
            "env_param_hash": env_param_hash(self.env_id),
        }


def generate_dataset(env_id: str, n: int, seed: int, noise: float = 0.05) -> Dataset:
    """Generate n successful expert demonstrations; per-trajectory seeds derive
    from the manifest seed, so regeneration is byte-identical."""
    trajectories = []
    children = np.random.SeedSequence(seed).spawn(n)
    for i, child in enumerate(children):
        env = make_env(env_id, seed=seed * 1000003 + i)
        rng = np.random.Generator(np.random.PCG64(child))
        trajectories.append(scripted_expert(env, rng, noise=noise))
    return Dataset(env_id, seed, noise, trajectories)


# ---------------------------------------------------------------------------
# Serialization


def _atomic_write(path: str, payload: bytes) -> None:
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_dataset(ds: Dataset, path: str) -> None:
    header = json.dumps(ds.manifest(), sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION), struct.pack("<I", len(header)), header]
    for t in ds.trajectories:
        states = np.ascontiguousarray(t.states, dtype="<f4")
        actions = np.ascontiguousarray(t.actions, dtype="<f4")
        parts.append(struct.pack("<I", len(states)))
        parts.append(states.tobytes())
        parts.append(struct.pack("<I", len(actions)))
        parts.append(actions.tobytes())
        parts.append(struct.pack("<B", 1 if t.success else 0))
    _atomic_write(path, b"".join(parts))


def load_dataset(path: str) -> Dataset:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}, expected {MAGIC!r}")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    (hlen,) = struct.unpack_from("<I", raw, 8)
    manifest = json.loads(raw[12 : 12 + hlen])
    off = 12 + hlen
    trajectories = []
    for _ in range(manifest["count"]):
        (ns,) = struct.unpack_from("<I", raw, off)
        off += 4
        states = np.frombuffer(raw, dtype="<f4", count=ns * STATE_DIM, offset=off)
        states = states.reshape(ns, STATE_DIM).copy()
        off += ns * STATE_DIM * 4
        (na,) = struct.unpack_from("<I", raw, off)
        off += 4
        actions = np.frombuffer(raw, dtype="<f4", count=na * ACTION_DIM, offset=off)
        actions = actions.reshape(na, ACTION_DIM).copy()
        off += na * ACTION_DIM * 4
        success = raw[off] == 1
        off += 1
        trajectories.append(Trajectory(manifest["env_id"], states, actions, success))
    if off != len(raw):
        raise FormatError(f"{path}: {len(raw) - off} trailing bytes")
    return Dataset(manifest["env_id"], manifest["seed"], manifest["noise"], trajectories,
                   stats=NormStats.from_dict(manifest["norm_stats"]))


def export_jsonl(ds: Dataset, path: str) -> None:
    """Debug export: one JSON object per trajectory per line."""
    lines = []
    for t in ds.trajectories:
        lines.append(json.dumps({
            "task_id": t.task_id,
            "states": t.states.tolist(),
            "actions": t.actions.tolist(),
            "success": t.success,
        }))
    _atomic_write(path, ("\n".join(lines) + "\n").encode())


# ---------------------------------------------------------------------------
# Training windows


@dataclass
class WindowSet:
    """Edge-padded (obs window, action window) pairs drawn from a dataset."""

    task_id: str
    obs: np.ndarray      # (n, o, STATE_DIM) normalized states
    actions: np.ndarray  # (n, h, ACTION_DIM) in [-1, 1]
    stats: NormStats


def build_windows(ds: Dataset, obs_steps: int, horizon: int, stride: int = 1) -> WindowSet:
    """Slice every trajectory into windows anchored at each timestep t:
    states s_{t-o+1..t} (edge-replicated at the front) and actions
    a_{t..t+h-1} (edge-replicated at the back)."""
    obs_list, act_list = [], []
    for traj in ds.trajectories:
        states = ds.stats.normalize_states(traj.states.astype(np.float64))
        actions = ds.stats.normalize_actions(traj.actions.astype(np.float64))
        n = len(traj.actions)
        for t in range(0, n, stride):
            lo = [states[max(0, i)] for i in range(t - obs_steps + 1, t + 1)]
            hi = [actions[min(n - 1, i)] for i in range(t, t + horizon)]
            obs_list.append(lo)
            act_list.append(hi)
    if np.abs(np.asarray(act_list)).max() > 1.0 + 1e-9:
        raise DataError("normalized actions escape [-1, 1]")
    return WindowSet(ds.env_id, np.asarray(obs_list), np.asarray(act_list), ds.stats)
