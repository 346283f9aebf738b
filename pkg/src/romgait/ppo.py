"""Clipped-surrogate policy optimization for the reduced-order teacher.

Experience is gathered synchronously from ``num_actors`` independent
environments stepped in lockstep; one batched policy evaluation drives all
of them.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from sklearn.base import BaseEstimator

from ._validation import check_is_fitted, check_observations
from .distributions import (
    LOG_STD_MAX,
    LOG_STD_MIN,
    gaussian_entropy,
    squashed_log_prob,
)
from .neural import (
    MLP,
    Adam,
    MlpSpec,
    RunningMeanStd,
    clip_grad_norm,
    load_checkpoint,
    save_checkpoint,
)
from .rom_env import EpisodeConfig, RomEnv, RomParams
from .physics2d import WorldConfig

log = logging.getLogger(__name__)

METRICS_COLUMNS = ("step", "mean_reward", "mean_speed_error", "episode_len", "episode_return")


class LengthMismatch(ValueError):
    pass


class NonFiniteLoss(FloatingPointError):
    pass


# -- policy ---------------------------------------------------------------------


class GaussianPolicy:
    """MLP mean, state-independent log-std, actions squashed by tanh."""

    def __init__(self, obs_dim: int, act_dim: int, hidden: Sequence[int] = (512, 512),
                 activation: str = "relu", log_std_init: float = -0.5, seed: int = 0):
        spec = MlpSpec(obs_dim, tuple((h, activation) for h in hidden), act_dim)
        self.mean_net = MLP(spec, seed=seed, init="orthogonal", output_gain=0.01)
        self.log_std = np.full(act_dim, float(log_std_init))

    @property
    def act_dim(self) -> int:
        return self.log_std.shape[0]

    def clamped_log_std(self) -> np.ndarray:
        return np.clip(self.log_std, LOG_STD_MIN, LOG_STD_MAX)

    def sample(self, obs: np.ndarray, rng: np.random.Generator):
        """Return (action, pre-squash sample, log-prob) for a batch of normalized observations."""
        mu = self.mean_net.forward(obs)
        log_std = self.clamped_log_std()
        u = mu + np.exp(log_std) * rng.standard_normal(mu.shape)
        return np.tanh(u), u, squashed_log_prob(u, mu, log_std)

    def deterministic(self, obs: np.ndarray) -> np.ndarray:
        return np.tanh(self.mean_net.forward(obs))


# -- rollouts -------------------------------------------------------------------


@dataclass
class RolloutBatch:
    """Transitions laid out as (time, actor, ...)."""

    obs: np.ndarray
    raw_actions: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    values: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    last_values: np.ndarray
    speed_errors: np.ndarray
    episode_returns: list = field(default_factory=list)
    episode_lengths: list = field(default_factory=list)

    @property
    def n_transitions(self) -> int:
        return self.rewards.size


class _ActorPool:
    """Environments plus their running observation, episode counters and reset seeds."""

    def __init__(self, envs: Sequence, seed_rng: np.random.Generator):
        self.envs = list(envs)
        self.seed_rng = seed_rng
        self.obs = np.stack([env.reset(int(seed_rng.integers(2**31))) for env in self.envs])
        self.ep_return = np.zeros(len(self.envs))
        self.ep_len = np.zeros(len(self.envs), dtype=int)


def collect_rollouts(policy: GaussianPolicy, value_net: MLP, pool: _ActorPool, length: int,
                     normalizer: RunningMeanStd, rng: np.random.Generator, gamma: float,
                     update_normalizer: bool = True) -> RolloutBatch:
    n = len(pool.envs)
    obs_dim = pool.obs.shape[1]
    act_dim = policy.act_dim
    buf_obs = np.empty((length, n, obs_dim))
    buf_u = np.empty((length, n, act_dim))
    buf_a = np.empty((length, n, act_dim))
    buf_lp = np.empty((length, n))
    buf_v = np.empty((length, n))
    buf_r = np.empty((length, n))
    buf_d = np.zeros((length, n))
    buf_err = np.empty((length, n))
    ep_returns, ep_lengths = [], []
    for t in range(length):
        if update_normalizer:
            normalizer.update(pool.obs)
        obs_n = normalizer.normalize(pool.obs)
        action, u, logp = policy.sample(obs_n, rng)
        value = value_net.forward(obs_n)[:, 0]
        buf_obs[t], buf_u[t], buf_a[t], buf_lp[t], buf_v[t] = obs_n, u, action, logp, value
        for i, env in enumerate(pool.envs):
            nxt, reward, done = env.step(action[i])
            buf_err[t, i] = abs(env.world.vel[0, 0] - env.config.target_speed)
            pool.ep_return[i] += reward
            pool.ep_len[i] += 1
            if done:
                if env.truncated:
                    # time-limit cut: fold the bootstrap value into the reward
                    boot = value_net.forward(normalizer.normalize(nxt))[0]
                    reward = reward + gamma * boot
                ep_returns.append(pool.ep_return[i])
                ep_lengths.append(pool.ep_len[i])
                pool.ep_return[i] = 0.0
                pool.ep_len[i] = 0
                nxt = env.reset(int(pool.seed_rng.integers(2**31)))
                buf_d[t, i] = 1.0
            buf_r[t, i] = reward
            pool.obs[i] = nxt
    last_v = value_net.forward(normalizer.normalize(pool.obs))[:, 0]
    return RolloutBatch(buf_obs, buf_u, buf_a, buf_lp, buf_v, buf_r, buf_d, last_v, buf_err,
                        ep_returns, ep_lengths)


# -- advantage estimation ---------------------------------------------------------


def compute_gae(rewards, values, dones, gamma: float, lam: float, last_value=0.0):
    """Generalized advantage estimates along axis 0.

    ``dones[t]`` marks that the episode ended after step ``t`` (no bootstrap
    from ``t + 1``). ``last_value`` bootstraps past the final step.
    Returns ``(advantages, returns)`` with ``returns = advantages + values``.
    """
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    dones = np.asarray(dones, dtype=float)
    if not rewards.shape == values.shape == dones.shape:
        raise LengthMismatch(f"rewards {rewards.shape}, values {values.shape}, dones {dones.shape}")
    adv = np.zeros_like(rewards)
    next_value = np.broadcast_to(np.asarray(last_value, dtype=float), rewards.shape[1:])
    running = np.zeros(rewards.shape[1:])
    for t in reversed(range(rewards.shape[0])):
        nonterminal = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_value * nonterminal - values[t]
        running = delta + gamma * lam * nonterminal * running
        adv[t] = running
        next_value = values[t]
    return adv, adv + values


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    std = adv.std()
    return (adv - adv.mean()) / (std if std > 0 else 1.0)


def clipped_surrogate(ratio, advantages, clip_ratio: float):
    """Per-sample min(r A, clip(r) A) and its derivative with respect to r."""
    ratio = np.asarray(ratio, dtype=float)
    advantages = np.asarray(advantages, dtype=float)
    unclipped = ratio * advantages
    clipped = np.clip(ratio, 1.0 - clip_ratio, 1.0 + clip_ratio) * advantages
    objective = np.minimum(unclipped, clipped)
    d_ratio = np.where(unclipped <= clipped, advantages, 0.0)
    return objective, d_ratio


# -- update -----------------------------------------------------------------------


@dataclass
class PpoConfig:
    num_actors: int = 8
    rollout_length: int = 128
    total_steps: int = 1_000_000
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_ratio: float = 0.2
    epochs_per_batch: int = 4
    minibatch_size: int = 256
    value_loss_coeff: float = 0.5
    entropy_coeff: float = 0.0
    learning_rate: float = 1e-4
    max_grad_norm: float = 0.5

    def __post_init__(self):
        if not 0 < self.gamma <= 1:
            raise ValueError(f"gamma must lie in (0, 1], got {self.gamma}")
        if not 0 <= self.gae_lambda <= 1:
            raise ValueError(f"gae_lambda must lie in [0, 1], got {self.gae_lambda}")
        if not self.clip_ratio > 0:
            raise ValueError("clip_ratio must be > 0")
        for key in ("num_actors", "rollout_length", "epochs_per_batch", "minibatch_size"):
            if getattr(self, key) < 1:
                raise ValueError(f"{key} must be >= 1")


@dataclass
class _Optimizers:
    policy: Adam
    log_std: Adam
    value: Adam


def policy_loss_and_grad(policy: GaussianPolicy, obs, u, old_log_probs, advantages, clip_ratio: float,
                         entropy_coeff: float = 0.0):
    """Clipped-surrogate policy loss (minus the entropy bonus) on one minibatch.

    Returns ``(loss, mean-net gradient, log-std gradient, info)``; ``info`` holds
    the probability ratios and the entropy.
    """
    m = obs.shape[0]
    mu = policy.mean_net.forward(obs, mode="train")
    log_std = policy.clamped_log_std()
    new_lp = squashed_log_prob(u, mu, log_std)
    log_ratio = new_lp - old_log_probs
    ratio = np.exp(log_ratio)
    surr, d_ratio = clipped_surrogate(ratio, advantages, clip_ratio)
    entropy = float(gaussian_entropy(log_std))
    loss = float(-surr.mean() - entropy_coeff * entropy)

    d_lp = -d_ratio * ratio / m  # dL/d new_logp
    inv_var = np.exp(-2.0 * log_std)
    d_mu = d_lp[:, None] * (u - mu) * inv_var
    d_log_std = np.sum(d_lp[:, None] * ((u - mu) ** 2 * inv_var - 1.0), axis=0)
    d_log_std -= entropy_coeff
    d_log_std *= (policy.log_std > LOG_STD_MIN) & (policy.log_std < LOG_STD_MAX)
    g_mu = policy.mean_net.backward(d_mu).copy()
    return loss, g_mu, d_log_std, {"ratio": ratio, "log_ratio": log_ratio, "entropy": entropy}


def ppo_update(policy: GaussianPolicy, value_net: MLP, batch: RolloutBatch, config: PpoConfig,
               optimizers: _Optimizers, rng: np.random.Generator) -> dict:
    """Epochs of minibatch steps on the clipped surrogate plus value regression."""
    adv, returns = compute_gae(batch.rewards, batch.values, batch.dones, config.gamma,
                               config.gae_lambda, batch.last_values)
    obs = batch.obs.reshape(-1, batch.obs.shape[-1])
    u = batch.raw_actions.reshape(-1, batch.raw_actions.shape[-1])
    old_lp = batch.log_probs.ravel()
    adv = normalize_advantages(adv.ravel())
    returns = returns.ravel()
    n = obs.shape[0]
    saved = (policy.mean_net.get_flat(), policy.log_std.copy(), value_net.get_flat())
    stats = {"policy_loss": [], "value_loss": [], "entropy": [], "approx_kl": [], "clip_frac": []}
    for _ in range(config.epochs_per_batch):
        order = rng.permutation(n)
        for start in range(0, n, config.minibatch_size):
            idx = order[start:start + config.minibatch_size]
            m = idx.shape[0]
            policy_loss, g_pi, d_log_std, info = policy_loss_and_grad(
                policy, obs[idx], u[idx], old_lp[idx], adv[idx], config.clip_ratio, config.entropy_coeff)
            ratio, log_ratio = info["ratio"], info["log_ratio"]

            v = value_net.forward(obs[idx], mode="train")[:, 0]
            value_loss = 0.5 * np.mean((v - returns[idx]) ** 2)
            if not (math.isfinite(policy_loss) and math.isfinite(value_loss)):
                policy.mean_net.set_flat(saved[0])
                policy.log_std[:] = saved[1]
                value_net.set_flat(saved[2])
                raise NonFiniteLoss("non-finite PPO loss; parameters restored")

            g_pi = clip_grad_norm(np.concatenate([g_pi, d_log_std]), config.max_grad_norm)
            optimizers.policy.step(g_pi[:-policy.act_dim])
            optimizers.log_std.step(g_pi[-policy.act_dim:])

            g_v = value_net.backward((config.value_loss_coeff * (v - returns[idx]) / m)[:, None])
            optimizers.value.step(clip_grad_norm(g_v, config.max_grad_norm))

            stats["policy_loss"].append(policy_loss)
            stats["value_loss"].append(value_loss)
            stats["entropy"].append(info["entropy"])
            stats["approx_kl"].append(float(np.mean(ratio - 1.0 - log_ratio)))
            stats["clip_frac"].append(float(np.mean(np.abs(ratio - 1.0) > config.clip_ratio)))
    return {k: float(np.mean(v)) for k, v in stats.items()}


# -- estimator ----------------------------------------------------------------------


class PPOTeacher(BaseEstimator):
    """Teacher policy for the reduced-order walker trained with clipped PPO.

    ``fit`` runs the collect -> advantage -> update loop for ``total_steps``
    environment steps; ``predict`` maps raw observations to actions.
    """

    def __init__(self, num_actors: int = 8, rollout_length: int = 128, total_steps: int = 1_000_000,
                 gamma: float = 0.99, gae_lambda: float = 0.95, clip_ratio: float = 0.2,
                 epochs_per_batch: int = 4, minibatch_size: int = 256, value_loss_coeff: float = 0.5,
                 entropy_coeff: float = 0.0, learning_rate: float = 1e-4, max_grad_norm: float = 0.5,
                 hidden: tuple = (512, 512), log_std_init: float = -0.5,
                 episode_config: EpisodeConfig | None = None, rom_params: RomParams | None = None,
                 world_config: WorldConfig | None = None, seed: int = 0,
                 checkpoint_every: int = 0):
        self.num_actors = num_actors
        self.rollout_length = rollout_length
        self.total_steps = total_steps
        self.gamma = gamma
        self.gae_lambda = gae_lambda
        self.clip_ratio = clip_ratio
        self.epochs_per_batch = epochs_per_batch
        self.minibatch_size = minibatch_size
        self.value_loss_coeff = value_loss_coeff
        self.entropy_coeff = entropy_coeff
        self.learning_rate = learning_rate
        self.max_grad_norm = max_grad_norm
        self.hidden = hidden
        self.log_std_init = log_std_init
        self.episode_config = episode_config
        self.rom_params = rom_params
        self.world_config = world_config
        self.seed = seed
        self.checkpoint_every = checkpoint_every

    def _ppo_config(self) -> PpoConfig:
        return PpoConfig(self.num_actors, self.rollout_length, self.total_steps, self.gamma,
                         self.gae_lambda, self.clip_ratio, self.epochs_per_batch, self.minibatch_size,
                         self.value_loss_coeff, self.entropy_coeff, self.learning_rate, self.max_grad_norm)

    def make_env(self) -> RomEnv:
        return RomEnv(self.episode_config or EpisodeConfig(), self.rom_params or RomParams(),
                      self.world_config or WorldConfig())

    def _init_model(self) -> None:
        env = self.make_env()
        self.obs_dim_, self.act_dim_ = env.obs_dim, env.act_dim
        self.policy_ = GaussianPolicy(env.obs_dim, env.act_dim, self.hidden, "relu",
                                      self.log_std_init, seed=self.seed)
        vspec = MlpSpec(env.obs_dim, tuple((h, "relu") for h in self.hidden), 1)
        self.value_net_ = MLP(vspec, seed=self.seed + 1, init="orthogonal", output_gain=1.0)
        self.normalizer_ = RunningMeanStd(env.obs_dim)
        self.optimizers_ = _Optimizers(Adam(self.policy_.mean_net, self.learning_rate),
                                       Adam(self.policy_.log_std, self.learning_rate),
                                       Adam(self.value_net_, self.learning_rate))
        self.rng_ = np.random.default_rng(self.seed)
        self.steps_done_ = 0
        self.metrics_ = []

    def fit(self, X=None, y=None, *, out_dir: str | Path | None = None, resume_from: str | Path | None = None,
            callback: Callable[[dict], None] | None = None) -> "PPOTeacher":
        """Train until ``total_steps`` environment steps have been collected.

        ``X`` and ``y`` are ignored (the estimator generates its own data).
        With ``out_dir`` set, an initial checkpoint, periodic checkpoints and
        ``metrics.csv`` are written there.
        """
        config = self._ppo_config()
        if resume_from is not None:
            self._restore(resume_from)
        else:
            self._init_model()
        out = Path(out_dir) if out_dir is not None else None
        metrics_path = None
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            metrics_path = out / "metrics.csv"
            if resume_from is None:
                with open(metrics_path, "w", newline="") as fh:
                    csv.writer(fh).writerow(METRICS_COLUMNS)
                self.save(out / "checkpoint_0.npz")
        pool = _ActorPool([self.make_env() for _ in range(config.num_actors)],
                          np.random.default_rng([self.seed, self.steps_done_]))
        per_iter = config.num_actors * config.rollout_length
        last_ckpt = self.steps_done_
        while self.steps_done_ < config.total_steps:
            batch = collect_rollouts(self.policy_, self.value_net_, pool, config.rollout_length,
                                     self.normalizer_, self.rng_, config.gamma)
            stats = ppo_update(self.policy_, self.value_net_, batch, config, self.optimizers_, self.rng_)
            self.steps_done_ += per_iter
            row = {
                "step": self.steps_done_,
                "mean_reward": float(batch.rewards.mean()),
                "mean_speed_error": float(batch.speed_errors.mean()),
                "episode_len": float(np.mean(batch.episode_lengths)) if batch.episode_lengths else float("nan"),
                "episode_return": float(np.mean(batch.episode_returns)) if batch.episode_returns else float("nan"),
            }
            self.metrics_.append({**row, **stats})
            log.info("ppo step=%d reward=%.4f speed_err=%.3f len=%.1f kl=%.4f", row["step"],
                     row["mean_reward"], row["mean_speed_error"], row["episode_len"], stats["approx_kl"])
            if metrics_path is not None:
                with open(metrics_path, "a", newline="") as fh:
                    csv.writer(fh).writerow([repr(row[c]) if isinstance(row[c], float) else row[c]
                                             for c in METRICS_COLUMNS])
                if self.checkpoint_every and self.steps_done_ - last_ckpt >= self.checkpoint_every:
                    self.save(out / f"checkpoint_{self.steps_done_}.npz")
                    last_ckpt = self.steps_done_
            if callback is not None:
                callback(row)
        if out is not None:
            self.save(out / "checkpoint_final.npz")
        return self

    # -- inference -----------------------------------------------------------------

    def predict(self, X, deterministic: bool = True, rng: np.random.Generator | None = None) -> np.ndarray:
        """Actions in [-1, 1] for raw (unnormalized) observations."""
        check_is_fitted(self, "policy_")
        obs, single = check_observations(X, self.obs_dim_)
        z = self.normalizer_.normalize(obs)
        if deterministic:
            act = self.policy_.deterministic(z)
        else:
            act, _, _ = self.policy_.sample(z, rng or np.random.default_rng())
        return act[0] if single else act

    def value(self, X) -> np.ndarray:
        check_is_fitted(self, "policy_")
        obs, single = check_observations(X, self.obs_dim_)
        v = self.value_net_.forward(self.normalizer_.normalize(obs))[:, 0]
        return v[0] if single else v

    # -- persistence ---------------------------------------------------------------

    def save(self, path) -> None:
        check_is_fitted(self, "policy_")
        arrays = {"log_std": self.policy_.log_std, **self.normalizer_.state_arrays("obs_norm")}
        meta = {
            "kind": "ppo_teacher",
            "steps_done": self.steps_done_,
            "rng": self.rng_.bit_generator.state,
            "params": _jsonable_params(self.get_params()),
        }
        save_checkpoint(path, nets={"policy_mean": self.policy_.mean_net, "value": self.value_net_},
                        optimizers={"policy_mean": self.optimizers_.policy.state,
                                    "log_std": self.optimizers_.log_std.state,
                                    "value": self.optimizers_.value.state},
                        arrays=arrays, meta=meta)

    def _restore(self, path) -> None:
        ckpt = load_checkpoint(path)
        if ckpt.meta.get("kind") != "ppo_teacher":
            raise ValueError(f"{path} is not a teacher checkpoint")
        self._init_model()
        self.policy_.mean_net.set_flat(ckpt.nets["policy_mean"].params.flat)
        self.policy_.log_std[:] = ckpt.arrays["log_std"]
        self.value_net_.set_flat(ckpt.nets["value"].params.flat)
        self.normalizer_.load_arrays(ckpt.arrays, "obs_norm")
        for name, opt in (("policy_mean", self.optimizers_.policy), ("log_std", self.optimizers_.log_std),
                          ("value", self.optimizers_.value)):
            st = ckpt.optimizers[name]
            opt.state.m[:], opt.state.v[:], opt.state.step = st.m, st.v, st.step
        self.rng_.bit_generator.state = ckpt.meta["rng"]
        self.steps_done_ = int(ckpt.meta["steps_done"])

    @classmethod
    def load(cls, path) -> "PPOTeacher":
        ckpt = load_checkpoint(path)
        if ckpt.meta.get("kind") != "ppo_teacher":
            raise ValueError(f"{path} is not a teacher checkpoint")
        teacher = cls(**_params_from_json(ckpt.meta["params"]))
        teacher._restore(path)
        return teacher


def _jsonable_params(params: dict) -> dict:
    out = {}
    for k, v in params.items():
        if hasattr(v, "__dataclass_fields__"):
            out[k] = {"__dataclass__": type(v).__name__, **{f: getattr(v, f) for f in v.__dataclass_fields__}}
        elif isinstance(v, tuple):
            out[k] = list(v)
        else:
            out[k] = v
    return out


_DATACLASSES = {"EpisodeConfig": EpisodeConfig, "RomParams": RomParams, "WorldConfig": WorldConfig}


def _params_from_json(params: dict) -> dict:
    out = {}
    for k, v in params.items():
        if isinstance(v, dict) and "__dataclass__" in v:
            fields = {f: (tuple(x) if isinstance(x, list) else x) for f, x in v.items() if f != "__dataclass__"}
            out[k] = _DATACLASSES[v["__dataclass__"]](**fields)
        elif isinstance(v, list):
            out[k] = tuple(v)
        else:
            out[k] = v
    return out


def rollout_policy(teacher: PPOTeacher, env: RomEnv, seed: int, max_steps: int | None = None):
    """Run one deterministic episode; returns (observations, rewards, gait features)."""
    obs = env.reset(seed)
    observations, rewards, features = [obs], [], [env.gait_feature()]
    limit = max_steps or env.config.max_steps
    done = False
    while not done and len(rewards) < limit:
        obs, r, done = env.step(teacher.predict(obs))
        observations.append(obs)
        rewards.append(r)
        features.append(env.gait_feature())
    return np.array(observations), np.array(rewards), np.array(features)
