"""Plain-text run configuration: INI-style sections with a strict schema.

Every key has a documented default; unknown sections or keys are rejected
rather than ignored, and the effective configuration (defaults included) can
be rendered back out for run logs.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional

from .diffusion import ModelConfig
from .lifecycle import StagePlan
from .moe import ConfigurationError

OUTPUT_DIR_ENV = "MOEPOLICY_OUT"
DEFAULT_OUTPUT_DIR = "runs"

# section -> key -> (type, default). The single source of truth for defaults.
SCHEMA = {
    "model": {
        "n_blocks": (int, 4),
        "embed_dim": (int, 64),
        "n_heads": (int, 4),
        "n_experts": (int, 8),
        "top_k": (int, 2),
        "expert_expansion": (int, 4),
        "light": (bool, False),
        "dense_ffn": (bool, False),
        "t_diff": (int, 16),
        "obs_steps": (int, 2),
        "horizon": (int, 4),
        "encoder_hidden": (int, 128),
    },
    "train": {
        "epochs": (int, 100),
        "steps_per_epoch": (int, 25),
        "batch_size": (int, 64),
        "lr": (float, 1e-4),
        "gamma": (float, 0.01),
        "seed": (int, 0),
        "eval_every": (int, 0),
        "eval_episodes": (int, 20),
        "eval_seed": (int, 1000),
        "execute_steps": (int, 2),
        "ema": (float, 0.0),
        "cosine_lr": (bool, False),
    },
    "data": {
        "tasks": (str, "reach,push,push-then-reach"),
        "demos": (int, 200),
        "seed": (int, 0),
        "noise": (float, 0.05),
    },
    "stage": {
        "regime": (str, "multitask"),
        "new_task": (str, ""),
        "expand_count": (int, 8),
        "new_top_k": (int, 0),       # 0 means "inherit the model top_k"
        "tune_encoder": (bool, False),
    },
}


@dataclass
class Config:
    """Validated run configuration; sections mirror the schema."""

    model: Dict = field(default_factory=dict)
    train: Dict = field(default_factory=dict)
    data: Dict = field(default_factory=dict)
    stage: Dict = field(default_factory=dict)

    @property
    def task_ids(self) -> List[str]:
        return [t.strip() for t in self.data["tasks"].split(",") if t.strip()]

    def model_config(self) -> ModelConfig:
        m = self.model
        return ModelConfig(n_blocks=m["n_blocks"], embed_dim=m["embed_dim"],
                           n_heads=m["n_heads"], n_experts=m["n_experts"],
                           top_k=m["top_k"], expert_expansion=m["expert_expansion"],
                           light=m["light"], dense_ffn=m["dense_ffn"],
                           t_diff=m["t_diff"], obs_steps=m["obs_steps"],
                           horizon=m["horizon"], encoder_hidden=m["encoder_hidden"])

    def stage_plan(self, regime: Optional[str] = None) -> StagePlan:
        t, s = self.train, self.stage
        return StagePlan(regime=regime or s["regime"], epochs=t["epochs"],
                         steps_per_epoch=t["steps_per_epoch"], batch_size=t["batch_size"],
                         lr=t["lr"], gamma=t["gamma"], seed=t["seed"],
                         eval_every=t["eval_every"], eval_episodes=t["eval_episodes"],
                         eval_seed=t["eval_seed"], execute_steps=t["execute_steps"],
                         ema=t["ema"], cosine_lr=t["cosine_lr"],
                         expand_count=s["expand_count"],
                         new_top_k=s["new_top_k"] or None,
                         tune_encoder=s["tune_encoder"])


def _coerce(section: str, key: str, raw: str):
    typ, _ = SCHEMA[section][key]
    if typ is bool:
        low = raw.strip().lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ConfigurationError(f"[{section}] {key}: {raw!r} is not a boolean")
    try:
        return typ(raw)
    except ValueError:
        raise ConfigurationError(
            f"[{section}] {key}: {raw!r} is not a valid {typ.__name__}") from None


def load_config(path: Optional[str] = None,
                overrides: Optional[Dict[str, Dict[str, str]]] = None) -> Config:
    """Build a Config from defaults, an optional INI file, and optional
    string-typed overrides (CLI flags). Unknown sections/keys error out."""
    values = {sec: {k: default for k, (_, default) in keys.items()}
              for sec, keys in SCHEMA.items()}

    def apply(sec: str, key: str, raw: str):
        if sec not in SCHEMA:
            raise ConfigurationError(f"unknown config section [{sec}]")
        if key not in SCHEMA[sec]:
            raise ConfigurationError(
                f"unknown key {key!r} in [{sec}]; valid: {sorted(SCHEMA[sec])}")
        values[sec][key] = _coerce(sec, key, raw)

    if path is not None:
        parser = configparser.ConfigParser()
        parser.optionxform = str  # keys are case-sensitive
        with open(path) as f:
            parser.read_file(f)
        for sec in parser.sections():
            for key, raw in parser[sec].items():
                apply(sec, key, raw)
    for sec, kv in (overrides or {}).items():
        for key, raw in kv.items():
            apply(sec, key, raw)
    return Config(**values)


def format_config(cfg: Config) -> str:
    """Render the effective configuration, defaults included, in the same
    section/key format the loader accepts."""
    lines = []
    for sec in SCHEMA:
        lines.append(f"[{sec}]")
        for key in SCHEMA[sec]:
            lines.append(f"{key} = {getattr(cfg, sec)[key]}")
        lines.append("")
    return "\n".join(lines).rstrip() + "\n"


def output_dir(explicit: Optional[str] = None) -> str:
    """Resolve the run output directory: explicit flag, then the
    environment variable, then ./runs."""
    return explicit or os.environ.get(OUTPUT_DIR_ENV) or DEFAULT_OUTPUT_DIR
