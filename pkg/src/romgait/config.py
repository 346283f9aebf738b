"""Pipeline configuration: TOML tables, dotted-key overrides and validation.

Every table maps onto one dataclass or estimator; unknown keys are errors so
typos never pass silently.
"""
from __future__ import annotations

import copy
import dataclasses
import inspect
from pathlib import Path
from typing import Any, Mapping

import tomli

from .biped_env import BipedParams
from .gail import DiscriminatorConfig
from .physics2d import WorldConfig
from .ppo import PPOTeacher, PpoConfig
from .rom_env import ConfigError, EpisodeConfig, RomParams
from .sac import SacConfig, SACStudent

_PPO_KEYS = ("num_actors", "rollout_length", "total_steps", "gamma", "gae_lambda", "clip_ratio",
             "epochs_per_batch", "minibatch_size", "value_loss_coeff", "entropy_coeff", "learning_rate",
             "max_grad_norm", "hidden", "log_std_init", "checkpoint_every")
_SAC_KEYS = ("total_steps", "eta", "replay_capacity", "batch_size", "gamma", "tau", "actor_lr", "critic_lr",
             "alpha_lr", "entropy_target", "auto_alpha", "initial_alpha", "updates_per_env_step",
             "warmup_steps", "hidden", "log_every", "checkpoint_every")


def _dataclass_defaults(cls) -> dict:
    return {f.name: (f.default if f.default is not dataclasses.MISSING else f.default_factory())
            for f in dataclasses.fields(cls)}


def _estimator_defaults(cls, keys) -> dict:
    sig = inspect.signature(cls.__init__)
    return {k: sig.parameters[k].default for k in keys}


def _teacher_episode_defaults() -> dict:
    d = _dataclass_defaults(EpisodeConfig)
    d.update(reward_mode="exponential", alpha=1.0, fall_height=0.8)
    return d


def _student_episode_defaults() -> dict:
    return dict(target_speed=1.0, alpha=2.0, max_steps=1000, reward_mode="exponential", fall_height=0.9)


def default_config() -> dict:
    world = _dataclass_defaults(WorldConfig)
    world["gravity"] = list(world["gravity"])
    cfg = {
        "run": {"seed": 0},
        "world": world,
        "rom": _dataclass_defaults(RomParams),
        "teacher_episode": _teacher_episode_defaults(),
        "ppo": _estimator_defaults(PPOTeacher, _PPO_KEYS),
        "record": {"T": 2000, "seed": 0},
        "biped": _dataclass_defaults(BipedParams),
        "student_episode": _student_episode_defaults(),
        "sac": _estimator_defaults(SACStudent, _SAC_KEYS),
        "discriminator": _dataclass_defaults(DiscriminatorConfig),
        "evaluate": {"episodes": 5, "steps": 2000, "alignment": "none", "seed": 1000, "export_frames": 100},
    }
    for table in cfg.values():
        for k, v in table.items():
            if isinstance(v, tuple):
                table[k] = list(v)
    return cfg


def _drop_none(cfg: dict) -> dict:
    return {s: {k: v for k, v in t.items() if v is not None} for s, t in cfg.items()}


def dumps_toml(cfg: Mapping) -> str:
    import tomli_w

    return tomli_w.dumps(_drop_none(dict(cfg)))


def parse_value(text: str) -> Any:
    """Interpret a command-line value as a TOML literal, falling back to a plain string."""
    try:
        return tomli.loads(f"v = {text}")["v"]
    except tomli.TOMLDecodeError:
        return text


def merge(base: dict, updates: Mapping) -> dict:
    """Deep-merge ``updates`` (table -> key -> value) into a copy of ``base``; unknown keys raise."""
    out = copy.deepcopy(base)
    for section, table in updates.items():
        if section not in out:
            raise ConfigError(section, "unknown config table")
        if not isinstance(table, Mapping):
            raise ConfigError(section, "expected a table")
        for key, value in table.items():
            if key not in out[section]:
                raise ConfigError(f"{section}.{key}", "unknown config key")
            out[section][key] = value
    return out


def apply_overrides(cfg: dict, overrides: Mapping[str, Any]) -> dict:
    """Overrides keyed by ``table.key``."""
    nested: dict[str, dict] = {}
    for dotted, value in overrides.items():
        if "." not in dotted:
            raise ConfigError(dotted, "override keys must look like table.key")
        section, key = dotted.split(".", 1)
        nested.setdefault(section, {})[key] = value
    return merge(cfg, nested)


def load_config(path: str | Path | None = None, overrides: Mapping[str, Any] | None = None) -> dict:
    """Defaults, then a TOML file (or the ``config`` of a run manifest), then overrides."""
    cfg = default_config()
    if path is not None:
        path = Path(path)
        if path.suffix == ".json":
            import json

            loaded = json.loads(path.read_text())["config"]
        else:
            with open(path, "rb") as fh:
                loaded = tomli.load(fh)
        cfg = merge(cfg, loaded)
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    validate(cfg)
    return cfg


def _build(cls, section: str, values: Mapping):
    try:
        kwargs = {k: (tuple(v) if isinstance(v, list) else v) for k, v in values.items()}
        return cls(**kwargs)
    except ConfigError as exc:
        raise ConfigError(f"{section}.{exc.key}", str(exc).split(": ", 1)[-1]) from None
    except (TypeError, ValueError) as exc:
        raise ConfigError(section, str(exc)) from None


def world_config(cfg) -> WorldConfig:
    return _build(WorldConfig, "world", cfg["world"])


def rom_params(cfg) -> RomParams:
    return _build(RomParams, "rom", cfg["rom"])


def teacher_episode(cfg) -> EpisodeConfig:
    return _build(EpisodeConfig, "teacher_episode", cfg["teacher_episode"])


def student_episode(cfg) -> EpisodeConfig:
    return _build(EpisodeConfig, "student_episode", cfg["student_episode"])


def biped_params(cfg) -> BipedParams:
    return _build(BipedParams, "biped", cfg["biped"])


def discriminator_config(cfg) -> DiscriminatorConfig:
    return _build(DiscriminatorConfig, "discriminator", cfg["discriminator"])


def _tuple(v):
    return tuple(v) if isinstance(v, list) else v


def make_teacher(cfg) -> PPOTeacher:
    p = {k: _tuple(v) for k, v in cfg["ppo"].items()}
    return PPOTeacher(**p, episode_config=teacher_episode(cfg), rom_params=rom_params(cfg),
                      world_config=world_config(cfg), seed=int(cfg["run"]["seed"]))


def make_student(cfg) -> SACStudent:
    p = {k: _tuple(v) for k, v in cfg["sac"].items()}
    return SACStudent(**p, discriminator=discriminator_config(cfg), episode_config=student_episode(cfg),
                      biped_params=biped_params(cfg), world_config=world_config(cfg),
                      seed=int(cfg["run"]["seed"]))


def validate(cfg) -> None:
    """Construct every typed object once so bad values fail before any work starts."""
    world_config(cfg)
    rom_params(cfg)
    teacher_episode(cfg)
    student_episode(cfg)
    biped_params(cfg)
    discriminator_config(cfg)
    ppo = cfg["ppo"]
    _build(PpoConfig, "ppo", {k: ppo[k] for k in ("num_actors", "rollout_length", "total_steps", "gamma",
                                                   "gae_lambda", "clip_ratio", "epochs_per_batch",
                                                   "minibatch_size", "value_loss_coeff", "entropy_coeff",
                                                   "learning_rate", "max_grad_norm")})
    sac = cfg["sac"]
    _build(SacConfig, "sac", {k: sac[k] for k in ("replay_capacity", "batch_size", "gamma", "tau", "actor_lr",
                                                   "critic_lr", "alpha_lr", "entropy_target", "auto_alpha",
                                                   "initial_alpha", "updates_per_env_step", "warmup_steps")})
    if not 0.0 <= float(sac["eta"]) <= 1.0:
        raise ConfigError("sac.eta", f"must lie in [0, 1], got {sac['eta']}")
    if int(cfg["record"]["T"]) < 1:
        raise ConfigError("record.T", "must be >= 1")
    ev = cfg["evaluate"]
    if int(ev["episodes"]) < 1:
        raise ConfigError("evaluate.episodes", "must be >= 1")
    if ev["alignment"] not in ("none", "phase"):
        raise ConfigError("evaluate.alignment", "must be 'none' or 'phase'")
