"""Deterministic 2D point-mass manipulation environments with scripted experts.

Three tasks share a [-1, 1]^2 arena, a 6-dim state and a 2-dim velocity
action so one policy body can serve all of them:

  reach            state = [agent, goal, 0, 0]
  push             state = [agent, object, target]
  push-then-reach  state = [agent, object, target] while pushing, then
                   [agent, goal, 0, 0] once the object sits on the target
                   (the reach-phase layout matches the reach task exactly)

Kinematics are velocity-free: position += action * DT, no inertia.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List, Optional, Tuple

import numpy as np

STATE_DIM = 6
ACTION_DIM = 2
DT = 0.08
STEP_CAP = 200
SUCCESS_RADIUS = 0.08
CONTACT_RADIUS = 0.12

ENV_IDS = ("reach", "push", "push-then-reach")


class DataError(ValueError):
    """Bad data fed to an environment (non-finite action, unknown env id)."""


class ExpertFailure(RuntimeError):
    """Scripted expert failed repeatedly; env parameters are off."""


def _clip_arena(p: np.ndarray) -> np.ndarray:
    return np.clip(p, -1.0, 1.0)


class Env:
    """Base point-mass environment. Subclasses fill `_observe` and `_success`."""

    env_id: str

    def __init__(self, seed: int = 0, step_cap: int = STEP_CAP):
        self.step_cap = step_cap
        self.rng = np.random.Generator(np.random.PCG64(seed))
        self.steps = 0
        self.clip_events = 0
        self.agent = np.zeros(2)
        self.reset()

    def reset(self, seed: Optional[int] = None) -> np.ndarray:
        if seed is not None:
            self.rng = np.random.Generator(np.random.PCG64(seed))
        self.steps = 0
        self.clip_events = 0
        self._sample_initial()
        return self._observe()

    def _sample_initial(self) -> None:
        raise NotImplementedError

    def _observe(self) -> np.ndarray:
        raise NotImplementedError

    def _success(self) -> bool:
        raise NotImplementedError

    def _apply(self, delta: np.ndarray) -> None:
        self.agent = _clip_arena(self.agent + delta)

    def step(self, action: np.ndarray) -> Tuple[np.ndarray, bool, bool]:
        action = np.asarray(action, dtype=np.float64).reshape(ACTION_DIM)
        if not np.all(np.isfinite(action)):
            raise DataError(f"non-finite action {action}")
        clipped = np.clip(action, -1.0, 1.0)
        if not np.array_equal(clipped, action):
            self.clip_events += 1
        self._apply(clipped * DT)
        self.steps += 1
        success = self._success()
        done = success or self.steps >= self.step_cap
        return self._observe(), done, success


class ReachEnv(Env):
    env_id = "reach"

    def _sample_initial(self) -> None:
        self.agent = self.rng.uniform(-0.8, 0.8, size=2)
        while True:
            self.goal = self.rng.uniform(-0.8, 0.8, size=2)
            if np.linalg.norm(self.goal - self.agent) > 0.3:
                break

    def _observe(self) -> np.ndarray:
        return np.concatenate([self.agent, self.goal, [0.0, 0.0]])

    def _success(self) -> bool:
        return float(np.linalg.norm(self.agent - self.goal)) < SUCCESS_RADIUS


class PushEnv(Env):
    env_id = "push"

    def _sample_initial(self) -> None:
        self.obj = self.rng.uniform(-0.5, 0.5, size=2)
        while True:
            self.target = self.rng.uniform(-0.6, 0.6, size=2)
            if 0.3 < np.linalg.norm(self.target - self.obj) < 1.0:
                break
        while True:
            self.agent = self.rng.uniform(-0.8, 0.8, size=2)
            # any side of the object is allowed (demos must cover recovery
            # from bad approach angles); just don't spawn already in contact
            if np.linalg.norm(self.agent - self.obj) > CONTACT_RADIUS + 0.03:
                break

    def _apply(self, delta: np.ndarray) -> None:
        prev = self.agent.copy()
        super()._apply(delta)
        # rigid contact: agent shoves the object out to the contact radius
        gap = self.obj - self.agent
        dist = float(np.linalg.norm(gap))
        if dist < CONTACT_RADIUS:
            motion = self.agent - prev
            if dist > 1e-9 and float(np.dot(gap, motion)) >= 0.0:
                direction = gap / dist
            else:
                # the step swept past the object's center: resolve along the
                # motion so a fast agent can't teleport the object behind itself
                m = float(np.linalg.norm(motion))
                direction = motion / m if m > 1e-9 else np.array([1.0, 0.0])
            self.obj = _clip_arena(self.agent + direction * CONTACT_RADIUS)

    def _observe(self) -> np.ndarray:
        return np.concatenate([self.agent, self.obj, self.target])

    def _success(self) -> bool:
        return float(np.linalg.norm(self.obj - self.target)) < SUCCESS_RADIUS


class PushThenReachEnv(PushEnv):
    """Push the object onto the target, then reach a separately sampled goal.

    Exposes `phase` (1 = push, 2 = reach) so expert-score traces can be
    segment-labeled."""

    env_id = "push-then-reach"

    def _sample_initial(self) -> None:
        super()._sample_initial()
        while True:
            self.goal = self.rng.uniform(-0.8, 0.8, size=2)
            if np.linalg.norm(self.goal - self.target) > 0.4:
                break
        self.phase = 1

    def _apply(self, delta: np.ndarray) -> None:
        if self.phase == 1:
            super()._apply(delta)
            if float(np.linalg.norm(self.obj - self.target)) < SUCCESS_RADIUS:
                self.phase = 2
        else:
            Env._apply(self, delta)

    def _observe(self) -> np.ndarray:
        if self.phase == 1:
            return np.concatenate([self.agent, self.obj, self.target])
        return np.concatenate([self.agent, self.goal, [0.0, 0.0]])

    def _success(self) -> bool:
        return self.phase == 2 and float(np.linalg.norm(self.agent - self.goal)) < SUCCESS_RADIUS


def make_env(env_id: str, seed: int = 0, step_cap: int = STEP_CAP) -> Env:
    envs = {e.env_id: e for e in (ReachEnv, PushEnv, PushThenReachEnv)}
    if env_id not in envs:
        raise DataError(f"unknown env id {env_id!r}; known: {sorted(envs)}")
    return envs[env_id](seed=seed, step_cap=step_cap)


# ---------------------------------------------------------------------------
# Scripted experts

_GAIN = 6.0


def _reach_action(agent: np.ndarray, goal: np.ndarray) -> np.ndarray:
    return np.clip(_GAIN * (goal - agent), -1.0, 1.0)


def _push_action(agent: np.ndarray, obj: np.ndarray, target: np.ndarray) -> np.ndarray:
    to_target = target - obj
    d = float(np.linalg.norm(to_target))
    direction = to_target / d if d > 1e-9 else np.array([1.0, 0.0])
    to_agent = agent - obj
    d_agent = float(np.linalg.norm(to_agent))
    behind_dot = float(np.dot(-to_agent / max(d_agent, 1e-9), direction))
    touching = d_agent < CONTACT_RADIUS * 1.3
    if behind_dot > (0.2 if touching else 0.92) and d_agent < CONTACT_RADIUS * 2.5:
        contact_pt = obj - direction * (0.9 * CONTACT_RADIUS)
        if touching:
            # push through: advance along the target line while steering back
            # onto the contact point; the speed cap keeps each step shorter
            # than the contact radius so the agent never overruns the object
            speed = np.clip(_GAIN * d, 0.25, 1.0)
            a = 2.5 * _GAIN * (contact_pt - agent) + direction * speed
            norm = float(np.linalg.norm(a))
            cap = 0.9 * CONTACT_RADIUS / DT
            if norm > cap:
                a = a * (cap / norm)
            return np.clip(a, -1.0, 1.0)
        # behind but not yet in contact: close onto the contact point
        # (proportional control, so the approach cannot overshoot)
        return np.clip(_GAIN * (contact_pt - agent), -1.0, 1.0)
    # off the pushing line: orbit the object toward the point behind it,
    # keeping clear of accidental contact
    radius = max(CONTACT_RADIUS * 2.0, 1e-9)
    ang = np.arctan2(to_agent[1], to_agent[0])
    ang_behind = np.arctan2(-direction[1], -direction[0])
    diff = np.arctan2(np.sin(ang_behind - ang), np.cos(ang_behind - ang))
    if diff < -2.6:
        # near dead-ahead the short way around is ambiguous; always orbit
        # counter-clockwise so the demonstrations stay unimodal there
        diff += 2.0 * np.pi
    ang_next = ang + np.clip(diff, -0.5, 0.5)
    waypoint = obj + radius * np.array([np.cos(ang_next), np.sin(ang_next)])
    return np.clip(_GAIN * (waypoint - agent), -1.0, 1.0)


def expert_action(env: Env, state: np.ndarray) -> np.ndarray:
    """Deterministic proportional-controller action for the current state."""
    if env.env_id == "reach":
        return _reach_action(state[0:2], state[2:4])
    if env.env_id == "push":
        return _push_action(state[0:2], state[2:4], state[4:6])
    if env.env_id == "push-then-reach":
        if env.phase == 1:
            return _push_action(state[0:2], state[2:4], state[4:6])
        return _reach_action(state[0:2], state[2:4])
    raise DataError(f"unknown env id {env.env_id!r}")


@dataclass
class Trajectory:
    """One recorded state-action sequence: len(states) == len(actions) + 1."""

    task_id: str
    states: np.ndarray  # (T+1, STATE_DIM) float32
    actions: np.ndarray  # (T, ACTION_DIM) float32
    success: bool

    def __post_init__(self):
        if len(self.states) != len(self.actions) + 1:
            raise DataError(
                f"trajectory lengths inconsistent: {len(self.states)} states, "
                f"{len(self.actions)} actions"
            )
        if not (np.isfinite(self.states).all() and np.isfinite(self.actions).all()):
            raise DataError("non-finite values in trajectory")


def scripted_expert(env: Env, rng: np.random.Generator, noise: float = 0.05,
                    max_resamples: int = 10) -> Trajectory:
    """Roll the proportional expert with bounded action noise until success.

    Failed episodes are resampled (fresh initial state from the env's own rng)
    up to `max_resamples` times, so every emitted trajectory ends in success.
    """
    for attempt in range(max_resamples + 1):
        state = env.reset()
        states = [state.copy()]
        actions: List[np.ndarray] = []
        success = False
        for _ in range(env.step_cap):
            a = expert_action(env, state)
            if noise > 0:
                a = np.clip(a + rng.normal(0.0, noise, size=ACTION_DIM), -1.0, 1.0)
            state, done, success = env.step(a)
            actions.append(a.copy())
            states.append(state.copy())
            if done:
                break
        if success:
            return Trajectory(env.env_id, np.asarray(states, dtype=np.float32),
                              np.asarray(actions, dtype=np.float32), True)
    raise ExpertFailure(f"scripted expert failed {max_resamples + 1} times on {env.env_id}")


# ---------------------------------------------------------------------------
# Closed-loop evaluation


@dataclass
class EvalResult:
    success_rate: float
    successes: List[bool]
    traces: List[np.ndarray]  # per-episode state sequences


def evaluate(policy, env_id: str, episodes: int, seed: int,
             step_cap: int = STEP_CAP) -> EvalResult:
    """Run `policy` closed-loop over seeded initial states.

    `policy` exposes reset() and act(state) -> action; receding-horizon
    replanning is the policy's concern.
    """
    if episodes < 1:
        raise DataError("episodes must be >= 1")
    successes = []
    traces = []
    for ep in range(episodes):
        env = make_env(env_id, seed=seed * 100003 + ep)
        policy.reset()
        state = env._observe()
        trace = [state.copy()]
        success = False
        for _ in range(step_cap):
            action = policy.act(state)
            state, done, success = env.step(action)
            trace.append(state.copy())
            if done:
                break
        successes.append(bool(success))
        traces.append(np.asarray(trace, dtype=np.float32))
    return EvalResult(sum(successes) / episodes, successes, traces)


class ScriptedPolicy:
    """Wraps the scripted expert as an evaluation policy (oracle baseline)."""

    def __init__(self, env_id: str, noise: float = 0.0, seed: int = 0):
        self.env_id = env_id
        self.noise = noise
        self.rng = np.random.Generator(np.random.PCG64(seed))
        self._env = make_env(env_id)  # phase tracking for the composed task

    def reset(self) -> None:
        self._env.reset()
        if hasattr(self._env, "phase"):
            self._env.phase = 1

    def act(self, state: np.ndarray) -> np.ndarray:
        if self._env.env_id == "push-then-reach":
            # infer phase from the observation layout: reach phase zero-pads dims 4:6
            self._env.phase = 2 if np.all(state[4:6] == 0.0) else 1
        a = expert_action(self._env, state)
        if self.noise > 0:
            a = np.clip(a + self.rng.normal(0.0, self.noise, size=ACTION_DIM), -1.0, 1.0)
        return a
