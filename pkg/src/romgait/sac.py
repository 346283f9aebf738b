"""Soft actor-critic student with an optional adversarial gait prior.

Twin critics with Polyak-averaged targets, a tanh-squashed Gaussian actor
whose log-std is produced by the network, and automatic temperature tuning.
The replay buffer keeps each transition's gait feature so the imitation
bonus is recomputed with the current discriminator whenever it is sampled.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from sklearn.base import BaseEstimator

from ._validation import check_is_fitted, check_observations
from .biped_env import BipedEnv, BipedParams, default_episode_config
from .distributions import LOG_STD_MAX, LOG_STD_MIN, squashed_log_prob
from .gail import DiscriminatorConfig, ScheduledDiscriminator, blend_reward
from .gaitdata import FEATURE_DIM, ReferenceDataset
from .neural import MLP, Adam, MlpSpec, load_checkpoint, save_checkpoint
from .physics2d import WorldConfig
from .ppo import NonFiniteLoss
from .rom_env import EpisodeConfig

log = logging.getLogger(__name__)

METRICS_COLUMNS = ("step", "r_env_mean", "r_im_mean", "critic1_loss", "critic2_loss", "actor_loss",
                   "alpha", "entropy", "episode_return", "episode_len", "mean_speed", "disc_updates",
                   "disc_frozen")


@dataclass(frozen=True)
class SacConfig:
    replay_capacity: int = 1_000_000
    batch_size: int = 256
    gamma: float = 0.99
    tau: float = 0.005
    actor_lr: float = 3e-4
    critic_lr: float = 3e-4
    alpha_lr: float = 3e-4
    entropy_target: float | None = None
    auto_alpha: bool = True
    initial_alpha: float = 1.0
    updates_per_env_step: float = 1.0
    warmup_steps: int = 5000

    def __post_init__(self):
        if not 0.0 < self.tau <= 1.0:
            raise ValueError("tau must lie in (0, 1]")
        if self.replay_capacity < self.batch_size:
            raise ValueError("replay_capacity must be >= batch_size")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if self.initial_alpha <= 0:
            raise ValueError("initial_alpha must be > 0")
        if self.updates_per_env_step <= 0:
            raise ValueError("updates_per_env_step must be > 0")


# -- replay -----------------------------------------------------------------------


class ReplayBuffer:
    """Fixed-capacity ring buffer with uniform sampling."""

    def __init__(self, capacity: int, obs_dim: int, act_dim: int, feature_dim: int = FEATURE_DIM):
        self.capacity = int(capacity)
        self.obs = np.zeros((capacity, obs_dim))
        self.actions = np.zeros((capacity, act_dim))
        self.r_env = np.zeros(capacity)
        self.features = np.zeros((capacity, feature_dim))
        self.next_obs = np.zeros((capacity, obs_dim))
        self.dones = np.zeros(capacity)
        self.size = 0
        self.cursor = 0

    def __len__(self) -> int:
        return self.size

    def add(self, obs, action, r_env, feature, next_obs, done) -> None:
        i = self.cursor
        self.obs[i] = obs
        self.actions[i] = action
        self.r_env[i] = r_env
        self.features[i] = feature
        self.next_obs[i] = next_obs
        self.dones[i] = float(done)
        self.cursor = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, n: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
        if self.size == 0:
            raise ValueError("cannot sample from an empty replay buffer")
        idx = rng.integers(0, self.size, n)
        return {"obs": self.obs[idx], "actions": self.actions[idx], "r_env": self.r_env[idx],
                "features": self.features[idx], "next_obs": self.next_obs[idx], "dones": self.dones[idx]}

    def sample_features(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return self.features[rng.integers(0, self.size, n)]

    def ordered_indices(self) -> np.ndarray:
        """Storage indices from oldest to newest."""
        if self.size < self.capacity:
            return np.arange(self.size)
        return (np.arange(self.capacity) + self.cursor) % self.capacity

    def state_arrays(self) -> dict[str, np.ndarray]:
        idx = self.ordered_indices()
        return {"replay.obs": self.obs[idx], "replay.actions": self.actions[idx],
                "replay.r_env": self.r_env[idx], "replay.features": self.features[idx],
                "replay.next_obs": self.next_obs[idx], "replay.dones": self.dones[idx]}

    def load_arrays(self, arrays) -> None:
        n = arrays["replay.r_env"].shape[0]
        self.size = min(n, self.capacity)
        keep = slice(n - self.size, n)
        self.obs[:self.size] = arrays["replay.obs"][keep]
        self.actions[:self.size] = arrays["replay.actions"][keep]
        self.r_env[:self.size] = arrays["replay.r_env"][keep]
        self.features[:self.size] = arrays["replay.features"][keep]
        self.next_obs[:self.size] = arrays["replay.next_obs"][keep]
        self.dones[:self.size] = arrays["replay.dones"][keep]
        self.cursor = self.size % self.capacity


# -- networks ------------------------------------------------------------------------


class SquashedGaussianActor:
    """MLP producing mean and log-std; the log-std is squashed into [LOG_STD_MIN, LOG_STD_MAX]."""

    def __init__(self, obs_dim: int, act_dim: int, hidden: Sequence[int] = (256, 256), seed: int = 0):
        spec = MlpSpec(obs_dim, tuple((h, "relu") for h in hidden), 2 * act_dim)
        self.net = MLP(spec, seed=seed, init="orthogonal", output_gain=0.01)
        self.act_dim = act_dim

    def _heads(self, obs):
        out = self.net.forward(obs)
        mu, raw = out[:, :self.act_dim], out[:, self.act_dim:]
        t = np.tanh(raw)
        log_std = LOG_STD_MIN + 0.5 * (LOG_STD_MAX - LOG_STD_MIN) * (t + 1.0)
        return mu, log_std, t

    def sample(self, obs, rng: np.random.Generator):
        """Reparameterized sample; returns (action, log_prob, cache for backward)."""
        mu, log_std, t = self._heads(obs)
        eps = rng.standard_normal(mu.shape)
        std = np.exp(log_std)
        u = mu + std * eps
        a = np.tanh(u)
        return a, squashed_log_prob(u, mu, log_std), (a, eps, std, t)

    def deterministic(self, obs) -> np.ndarray:
        mu, _, _ = self._heads(obs)
        return np.tanh(mu)

    def backward(self, d_action: np.ndarray, d_logp: np.ndarray, cache) -> np.ndarray:
        """Parameter gradient of sum_i(d_action_i . a_i + d_logp_i * logp_i) for the cached sample.

        The network's forward cache must still belong to that sample.
        """
        a, eps, std, t = cache
        d_u = d_action * (1.0 - a * a) + d_logp[:, None] * 2.0 * a
        d_mu = d_u
        d_log_std = d_u * std * eps - d_logp[:, None]
        d_raw = d_log_std * 0.5 * (LOG_STD_MAX - LOG_STD_MIN) * (1.0 - t * t)
        return self.net.backward(np.concatenate([d_mu, d_raw], axis=1))


def make_critic(obs_dim: int, act_dim: int, hidden: Sequence[int] = (256, 256), seed: int = 0) -> MLP:
    spec = MlpSpec(obs_dim + act_dim, tuple((h, "relu") for h in hidden), 1)
    return MLP(spec, seed=seed, init="orthogonal", output_gain=1.0)


def sample_action(actor: SquashedGaussianActor, state, mode: str = "stochastic",
                  rng: np.random.Generator | None = None) -> tuple[np.ndarray, np.ndarray]:
    """(action, log_prob); deterministic mode returns the squashed mean and the log-density there."""
    obs = np.atleast_2d(np.asarray(state, dtype=float))
    if mode == "deterministic":
        mu, log_std, _ = actor._heads(obs)
        a = np.tanh(mu)
        logp = squashed_log_prob(mu, mu, log_std)
    elif mode == "stochastic":
        a, logp, _ = actor.sample(obs, rng if rng is not None else np.random.default_rng())
    else:
        raise ValueError(f"mode must be 'stochastic' or 'deterministic', got {mode!r}")
    if np.ndim(state) == 1:
        return a[0], logp[0]
    return a, logp


def q_values(critic: MLP, obs, actions) -> np.ndarray:
    return critic.forward(np.concatenate([obs, actions], axis=1))[:, 0]


def critic_target(batch: dict, critics_target: Sequence[MLP], actor: SquashedGaussianActor,
                  alpha: float, gamma: float, reward_vector, rng: np.random.Generator) -> np.ndarray:
    """y = r + gamma (1 - done) (min_k Q'_k(s', a') - alpha log pi(a'|s')) with a' ~ pi(s')."""
    next_a, next_logp, _ = actor.sample(batch["next_obs"], rng)
    q_next = np.minimum(*(q_values(c, batch["next_obs"], next_a) for c in critics_target))
    soft = q_next - alpha * next_logp
    return np.asarray(reward_vector, dtype=float) + gamma * (1.0 - batch["dones"]) * soft


def polyak_update(target: MLP, online: MLP, tau: float) -> None:
    target.params.flat *= 1.0 - tau
    target.params.flat += tau * online.params.flat


@dataclass
class SacNetworks:
    actor: SquashedGaussianActor
    q1: MLP
    q2: MLP
    q1_target: MLP
    q2_target: MLP
    log_alpha: np.ndarray
    actor_opt: Adam = None
    q1_opt: Adam = None
    q2_opt: Adam = None
    alpha_opt: Adam = None

    @classmethod
    def create(cls, obs_dim: int, act_dim: int, config: SacConfig, hidden=(256, 256), seed: int = 0):
        actor = SquashedGaussianActor(obs_dim, act_dim, hidden, seed)
        q1 = make_critic(obs_dim, act_dim, hidden, seed + 1)
        q2 = make_critic(obs_dim, act_dim, hidden, seed + 2)
        nets = cls(actor, q1, q2, q1.copy(), q2.copy(), np.array([math.log(config.initial_alpha)]))
        nets.actor_opt = Adam(actor.net, config.actor_lr)
        nets.q1_opt = Adam(q1, config.critic_lr)
        nets.q2_opt = Adam(q2, config.critic_lr)
        nets.alpha_opt = Adam(nets.log_alpha, config.alpha_lr)
        return nets

    @property
    def alpha(self) -> float:
        return float(np.exp(self.log_alpha[0]))


def _finite(*values) -> bool:
    return all(np.all(np.isfinite(v)) for v in values)


def critic_loss_and_grad(q: MLP, obs, actions, y) -> tuple[float, np.ndarray]:
    """Mean squared TD error of one critic and its parameter gradient."""
    diff = q_values(q, obs, actions) - y
    return float(np.mean(diff * diff)), q.backward((2.0 / obs.shape[0]) * diff[:, None]).copy()


def actor_loss_and_grad(actor: SquashedGaussianActor, critics: Sequence[MLP], obs, alpha: float,
                        rng: np.random.Generator) -> tuple[float, np.ndarray, np.ndarray]:
    """mean(alpha log pi(a|s) - min_k Q_k(s, a)) for a reparameterized ``a`` ~ pi(s).

    Returns the loss, the actor's parameter gradient and the sampled log-probs.
    """
    n = obs.shape[0]
    new_a, logp, cache = actor.sample(obs, rng)
    actor_fwd = actor.net._cache
    qs, dq = [], []
    for q in critics:
        qs.append(q_values(q, obs, new_a))
        dq.append(q.backward_input(np.ones((n, 1)))[:, -actor.act_dim:])
    use_first = qs[0] <= qs[1]
    q_min = np.where(use_first, qs[0], qs[1])
    dq_min = np.where(use_first[:, None], dq[0], dq[1])
    loss = float(np.mean(alpha * logp - q_min))
    actor.net._cache = actor_fwd
    grad = actor.backward(-dq_min / n, np.full(n, alpha / n), cache).copy()
    return loss, grad, logp


def sac_update(nets: SacNetworks, batch: dict, config: SacConfig, rewards,
               rng: np.random.Generator) -> dict:
    """One critic, actor and temperature step followed by the Polyak update.

    ``rewards`` is the per-sample (already blended) reward vector. Raises
    :class:`NonFiniteLoss` before touching any parameters if a loss or
    gradient is not finite.
    """
    obs, actions = batch["obs"], batch["actions"]
    act_dim = actions.shape[1]
    alpha = nets.alpha
    y = critic_target(batch, (nets.q1_target, nets.q2_target), nets.actor, alpha, config.gamma, rewards, rng)

    losses, grads = zip(*(critic_loss_and_grad(q, obs, actions, y) for q in (nets.q1, nets.q2)))
    actor_loss, actor_grad, logp = actor_loss_and_grad(nets.actor, (nets.q1, nets.q2), obs, alpha, rng)

    target = config.entropy_target if config.entropy_target is not None else -float(act_dim)
    alpha_grad = np.array([-alpha * float(np.mean(logp + target))])

    if not _finite(losses, actor_loss, *grads, actor_grad, alpha_grad):
        raise NonFiniteLoss("non-finite SAC loss or gradient")
    nets.q1_opt.step(grads[0])
    nets.q2_opt.step(grads[1])
    nets.actor_opt.step(actor_grad)
    if config.auto_alpha:
        nets.alpha_opt.step(alpha_grad)
    polyak_update(nets.q1_target, nets.q1, config.tau)
    polyak_update(nets.q2_target, nets.q2, config.tau)
    return {"critic1_loss": losses[0], "critic2_loss": losses[1], "actor_loss": actor_loss,
            "alpha": nets.alpha, "entropy": float(-np.mean(logp))}


# -- estimator ----------------------------------------------------------------------


class SACStudent(BaseEstimator):
    """Biped student trained with SAC on the eta-blended reward.

    ``fit(X)`` takes the teacher's reference gait (a :class:`ReferenceDataset`
    or a (T, 5) array of normalized features). With ``eta == 1`` the
    discriminator is never built or consulted and ``X`` may be None.
    """

    def __init__(self, total_steps: int = 300_000, eta: float = 0.5, replay_capacity: int = 1_000_000,
                 batch_size: int = 256, gamma: float = 0.99, tau: float = 0.005, actor_lr: float = 3e-4,
                 critic_lr: float = 3e-4, alpha_lr: float = 3e-4, entropy_target: float | None = None,
                 auto_alpha: bool = True, initial_alpha: float = 1.0, updates_per_env_step: float = 1.0,
                 warmup_steps: int = 5000, hidden: tuple = (256, 256),
                 discriminator: DiscriminatorConfig | None = None, episode_config: EpisodeConfig | None = None,
                 biped_params: BipedParams | None = None, world_config: WorldConfig | None = None,
                 seed: int = 0, log_every: int = 1000, checkpoint_every: int = 0):
        self.total_steps = total_steps
        self.eta = eta
        self.replay_capacity = replay_capacity
        self.batch_size = batch_size
        self.gamma = gamma
        self.tau = tau
        self.actor_lr = actor_lr
        self.critic_lr = critic_lr
        self.alpha_lr = alpha_lr
        self.entropy_target = entropy_target
        self.auto_alpha = auto_alpha
        self.initial_alpha = initial_alpha
        self.updates_per_env_step = updates_per_env_step
        self.warmup_steps = warmup_steps
        self.hidden = hidden
        self.discriminator = discriminator
        self.episode_config = episode_config
        self.biped_params = biped_params
        self.world_config = world_config
        self.seed = seed
        self.log_every = log_every
        self.checkpoint_every = checkpoint_every

    def sac_config(self) -> SacConfig:
        return SacConfig(self.replay_capacity, self.batch_size, self.gamma, self.tau, self.actor_lr,
                         self.critic_lr, self.alpha_lr, self.entropy_target, self.auto_alpha,
                         self.initial_alpha, self.updates_per_env_step, self.warmup_steps)

    def disc_config(self) -> DiscriminatorConfig:
        return self.discriminator or DiscriminatorConfig()

    def make_env(self) -> BipedEnv:
        return BipedEnv(self.episode_config or default_episode_config(), self.biped_params or BipedParams(),
                        self.world_config or WorldConfig())

    @property
    def uses_discriminator(self) -> bool:
        return self.eta < 1.0

    def _init_model(self, reference: np.ndarray | None) -> None:
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError(f"eta must lie in [0, 1], got {self.eta}")
        config = self.sac_config()
        env = self.make_env()
        window = self.disc_config().window
        self.obs_dim_, self.act_dim_ = env.obs_dim, env.act_dim
        self.nets_ = SacNetworks.create(env.obs_dim, env.act_dim, config, tuple(self.hidden), self.seed)
        self.replay_ = ReplayBuffer(min(config.replay_capacity, max(self.total_steps, config.batch_size)),
                                    env.obs_dim, env.act_dim, FEATURE_DIM * window)
        self.disc_ = None
        if self.uses_discriminator:
            if reference is None:
                raise ValueError("a reference gait is required when eta < 1")
            self.disc_ = ScheduledDiscriminator(reference, self.disc_config(), seed=self.seed)
        self.rng_ = np.random.default_rng(self.seed)
        self.steps_done_ = 0
        self.updates_done_ = 0
        self.metrics_ = []

    def _blended(self, batch: dict) -> tuple[np.ndarray, np.ndarray]:
        r_env = batch["r_env"]
        if self.disc_ is None:
            return r_env, np.zeros_like(r_env)
        r_im = self.disc_.bonus(batch["features"])
        return blend_reward(r_env, r_im, self.eta), r_im

    def fit(self, X=None, y=None, *, out_dir: str | Path | None = None,
            callback: Callable[[dict], None] | None = None) -> "SACStudent":
        reference = None
        if X is not None:
            frames = X.frames if isinstance(X, ReferenceDataset) else X
            reference, _ = check_observations(frames, FEATURE_DIM, "reference")
        self._init_model(reference)
        config = self.sac_config()
        out = Path(out_dir) if out_dir is not None else None
        metrics_path = None
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            metrics_path = out / "metrics.csv"
            with open(metrics_path, "w", newline="") as fh:
                csv.writer(fh).writerow(METRICS_COLUMNS)
        env = self.make_env()
        window = self.disc_config().window
        seeds = np.random.default_rng([self.seed, 1])
        obs = env.reset(int(seeds.integers(2**31)))
        history = _FeatureWindow(window, env.gait_feature() / env.nominal_height)
        ep_return, ep_len, x_start = 0.0, 0, env.world.q[0]
        window_stats = _WindowStats()
        update_debt = 0.0
        last_ckpt = 0
        while self.steps_done_ < self.total_steps:
            if self.steps_done_ < config.warmup_steps:
                action = self.rng_.uniform(-1.0, 1.0, self.act_dim_)
            else:
                action, _, _ = self.nets_.actor.sample(obs[None, :], self.rng_)
                action = action[0]
            next_obs, r_env, done = env.step(action)
            feature = history.push(env.gait_feature() / env.nominal_height)
            self.replay_.add(obs, action, r_env, feature, next_obs, env.terminated)
            self.steps_done_ += 1
            ep_return += r_env
            ep_len += 1
            obs = next_obs
            if done:
                window_stats.episode(ep_return, ep_len, (env.world.q[0] - x_start) / (ep_len * env.world_config.dt))
                obs = env.reset(int(seeds.integers(2**31)))
                history = _FeatureWindow(window, env.gait_feature() / env.nominal_height)
                ep_return, ep_len, x_start = 0.0, 0, env.world.q[0]

            if self.steps_done_ >= config.warmup_steps and len(self.replay_) >= config.batch_size:
                update_debt += config.updates_per_env_step
                while update_debt >= 1.0:
                    update_debt -= 1.0
                    self._learn_once(config, window_stats)

            if self.steps_done_ % self.log_every == 0 or self.steps_done_ == self.total_steps:
                row = window_stats.row(self.steps_done_, self.disc_)
                self.metrics_.append(row)
                log.info("sac step=%d r_env=%.3f r_im=%.3f alpha=%.3f ep_len=%.1f", row["step"],
                         row["r_env_mean"], row["r_im_mean"], row["alpha"], row["episode_len"])
                if metrics_path is not None:
                    with open(metrics_path, "a", newline="") as fh:
                        csv.writer(fh).writerow([_fmt(row[c]) for c in METRICS_COLUMNS])
                if callback is not None:
                    callback(row)
                window_stats = _WindowStats()
            if out is not None and self.checkpoint_every and self.steps_done_ - last_ckpt >= self.checkpoint_every:
                self.save(out / f"checkpoint_{self.steps_done_}.npz")
                last_ckpt = self.steps_done_
        if out is not None:
            self.save(out / "checkpoint_final.npz")
            if self.disc_ is not None:
                self.disc_.write_log(out / "discriminator_metrics.csv")
        return self

    def _learn_once(self, config: SacConfig, stats: "_WindowStats") -> None:
        batch = self.replay_.sample(config.batch_size, self.rng_)
        rewards, r_im = self._blended(batch)
        try:
            info = sac_update(self.nets_, batch, config, rewards, self.rng_)
        except NonFiniteLoss:
            log.warning("non-finite SAC update at step %d skipped", self.steps_done_)
            return
        self.updates_done_ += 1
        stats.update(batch["r_env"], r_im, info)
        if self.disc_ is not None:
            self.disc_.scheduled_update(self.steps_done_, self.updates_done_, self.replay_.sample_features)

    # -- inference -------------------------------------------------------------------

    def predict(self, X, deterministic: bool = True, rng: np.random.Generator | None = None) -> np.ndarray:
        check_is_fitted(self, "nets_")
        obs, single = check_observations(X, self.obs_dim_)
        if deterministic:
            act = self.nets_.actor.deterministic(obs)
        else:
            act, _, _ = self.nets_.actor.sample(obs, rng or np.random.default_rng())
        return act[0] if single else act

    # -- persistence -----------------------------------------------------------------

    def save(self, path) -> None:
        check_is_fitted(self, "nets_")
        n = self.nets_
        arrays = {"log_alpha": n.log_alpha}
        meta = {"kind": "sac_student", "steps_done": self.steps_done_, "updates_done": self.updates_done_,
                "params": _jsonable(self.get_params())}
        nets = {"actor": n.actor.net, "q1": n.q1, "q2": n.q2, "q1_target": n.q1_target,
                "q2_target": n.q2_target}
        opts = {"actor": n.actor_opt.state, "q1": n.q1_opt.state, "q2": n.q2_opt.state,
                "alpha": n.alpha_opt.state}
        if self.disc_ is not None:
            nets["discriminator"] = self.disc_.net
            opts["discriminator"] = self.disc_.optimizer.state
            arrays.update(self.disc_.state_arrays())
        save_checkpoint(path, nets, opts, arrays, meta)

    @classmethod
    def load(cls, path) -> "SACStudent":
        ck = load_checkpoint(path)
        if ck.meta.get("kind") != "sac_student":
            raise ValueError(f"{path} is not a student checkpoint")
        student = cls(**_from_jsonable(ck.meta["params"]))
        env = student.make_env()
        config = student.sac_config()
        student.obs_dim_, student.act_dim_ = env.obs_dim, env.act_dim
        student.nets_ = SacNetworks.create(env.obs_dim, env.act_dim, config, tuple(student.hidden), student.seed)
        for name in ("q1", "q2", "q1_target", "q2_target"):
            getattr(student.nets_, name).set_flat(ck.nets[name].get_flat())
        student.nets_.actor.net.set_flat(ck.nets["actor"].get_flat())
        student.nets_.log_alpha[:] = ck.arrays["log_alpha"]
        student.steps_done_ = int(ck.meta["steps_done"])
        student.updates_done_ = int(ck.meta["updates_done"])
        student.disc_ = None
        return student


class _FeatureWindow:
    """Last ``window`` normalized features of the running episode, padded with the first."""

    def __init__(self, window: int, first: np.ndarray):
        self.frames = [np.asarray(first, dtype=float)] * window

    def push(self, feature: np.ndarray) -> np.ndarray:
        self.frames = self.frames[1:] + [np.asarray(feature, dtype=float)]
        return np.concatenate(self.frames)


@dataclass
class _WindowStats:
    r_env: list = field(default_factory=list)
    r_im: list = field(default_factory=list)
    info: list = field(default_factory=list)
    returns: list = field(default_factory=list)
    lengths: list = field(default_factory=list)
    speeds: list = field(default_factory=list)

    def update(self, r_env, r_im, info) -> None:
        self.r_env.append(float(np.mean(r_env)))
        self.r_im.append(float(np.mean(r_im)))
        self.info.append(info)

    def episode(self, ret: float, length: int, speed: float) -> None:
        self.returns.append(ret)
        self.lengths.append(length)
        self.speeds.append(speed)

    def row(self, step: int, disc: ScheduledDiscriminator | None) -> dict:
        def mean(xs):
            return float(np.mean(xs)) if xs else float("nan")

        def info_mean(key):
            return mean([i[key] for i in self.info])

        return {"step": step, "r_env_mean": mean(self.r_env), "r_im_mean": mean(self.r_im),
                "critic1_loss": info_mean("critic1_loss"), "critic2_loss": info_mean("critic2_loss"),
                "actor_loss": info_mean("actor_loss"), "alpha": info_mean("alpha"),
                "entropy": info_mean("entropy"), "episode_return": mean(self.returns),
                "episode_len": mean(self.lengths), "mean_speed": mean(self.speeds),
                "disc_updates": disc.updates if disc is not None else 0,
                "disc_frozen": int(disc.frozen) if disc is not None else 0}


def _fmt(v):
    return repr(v) if isinstance(v, float) else v


_DATACLASSES = {"EpisodeConfig": EpisodeConfig, "BipedParams": BipedParams, "WorldConfig": WorldConfig,
                "DiscriminatorConfig": DiscriminatorConfig}


def _jsonable(params: dict) -> dict:
    out = {}
    for k, v in params.items():
        if hasattr(v, "__dataclass_fields__"):
            out[k] = {"__dataclass__": type(v).__name__, **asdict(v)}
        elif isinstance(v, tuple):
            out[k] = list(v)
        else:
            out[k] = v
    return out


def _from_jsonable(params: dict) -> dict:
    def fix(x):
        return tuple(fix(e) for e in x) if isinstance(x, list) else x

    out = {}
    for k, v in params.items():
        if isinstance(v, dict) and "__dataclass__" in v:
            out[k] = _DATACLASSES[v["__dataclass__"]](**{f: fix(x) for f, x in v.items() if f != "__dataclass__"})
        else:
            out[k] = fix(v)
    return out


def rollout_features(policy, env, seed: int, steps: int) -> tuple[np.ndarray, np.ndarray, bool]:
    """Deterministic rollout; returns normalized gait features, rewards and whether it fell."""
    obs = env.reset(seed)
    feats, rewards = [], []
    fell = False
    for _ in range(steps):
        if env.done and not env.terminated:
            env.done = env.truncated = False
        obs, r, _ = env.step(policy.predict(obs, deterministic=True))
        feats.append(env.gait_feature() / env.nominal_height)
        rewards.append(r)
        if env.terminated:
            fell = True
            break
    return np.array(feats).reshape(-1, FEATURE_DIM), np.array(rewards), fell
