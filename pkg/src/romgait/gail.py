"""Adversarial gait prior: discriminator training, imitation bonus and reward blending.

The discriminator sees height-normalized gait features (optionally a window of
consecutive frames) and is trained to call teacher frames real and student
frames fake. Its output turns into a bonus ``-log(1 - D)`` for the student.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from ._validation import check_is_fitted, check_observations
from .gaitdata import FEATURE_DIM
from .neural import MLP, Adam, MlpSpec, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

PROB_CLIP = 1e-6
DISC_METRICS_COLUMNS = ("update", "global_step", "learner_updates", "train_loss", "holdout_loss",
                        "penalty", "grad_norm_gap", "frozen")


class EmptyBatch(ValueError):
    pass


@dataclass(frozen=True)
class DiscriminatorConfig:
    hidden: tuple[int, ...] = (64, 32)
    activation: str = "leaky_relu"
    dropout_prob: float = 0.2
    input_noise_sigma: float = 0.05
    label_real: float = 0.9
    label_fake: float = 0.1
    learning_rate: float = 1e-5
    gradient_penalty_coeff: float = 10.0
    update_every: int = 5
    start_step: int = 5000
    holdout_fraction: float = 0.1
    patience: int = 10
    batch_size: int = 256
    window: int = 1

    def __post_init__(self):
        if not 0.0 < self.holdout_fraction < 1.0:
            raise ValueError("holdout_fraction must lie in (0, 1)")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        for name in ("label_real", "label_fake"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.update_every < 1 or self.window < 1 or self.batch_size < 1:
            raise ValueError("update_every, window and batch_size must be >= 1")
        if self.input_noise_sigma < 0 or self.gradient_penalty_coeff < 0:
            raise ValueError("noise sigma and penalty coefficient must be >= 0")

    @property
    def input_dim(self) -> int:
        return FEATURE_DIM * self.window

    def mlp_spec(self) -> MlpSpec:
        return MlpSpec(self.input_dim, tuple((h, self.activation) for h in self.hidden), 1,
                       "sigmoid", (self.dropout_prob,) * len(self.hidden))


def build_discriminator(config: DiscriminatorConfig, seed: int = 0) -> MLP:
    return MLP(config.mlp_spec(), seed=seed, init="fan_in_uniform")


def stack_windows(frames: np.ndarray, window: int) -> np.ndarray:
    """Rows of ``window`` consecutive frames concatenated oldest first."""
    frames = np.asarray(frames, dtype=float)
    if window == 1:
        return frames
    n = frames.shape[0] - window + 1
    if n < 1:
        raise EmptyBatch(f"need at least {window} frames to form a window")
    return np.concatenate([frames[i:i + n] for i in range(window)], axis=1)


# -- formulas ------------------------------------------------------------------


def imitation_bonus(feature, net: MLP) -> np.ndarray | float:
    """-log(1 - D(feature)) with D evaluated in eval mode and clipped away from 0 and 1."""
    d = np.clip(net.forward(feature, mode="eval"), PROB_CLIP, 1.0 - PROB_CLIP)
    r = -np.log1p(-d)
    return float(r[0]) if np.ndim(feature) == 1 else r.ravel()


def bonus_from_probability(d) -> np.ndarray:
    d = np.clip(np.asarray(d, dtype=float), PROB_CLIP, 1.0 - PROB_CLIP)
    return -np.log1p(-d)


def blend_reward(r_env, r_im, eta: float):
    """eta * r_env + (1 - eta) * r_im."""
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"eta must lie in [0, 1], got {eta}")
    r = eta * np.asarray(r_env, dtype=float) + (1.0 - eta) * np.asarray(r_im, dtype=float)
    return float(r) if r.ndim == 0 else r


def bce_with_logits(logits: np.ndarray, target: float) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy against a constant target and its gradient w.r.t. logits."""
    z = np.asarray(logits, dtype=float).ravel()
    loss = np.logaddexp(0.0, z) - target * z
    prob = 0.5 * (1.0 + np.tanh(0.5 * z))
    return float(loss.mean()), (prob - target) / z.size


@dataclass
class LossInfo:
    loss: float
    bce: float
    penalty: float
    grad_norm_gap: float


def discriminator_loss(real, fake, net: MLP, seed: int | None = None,
                       config: DiscriminatorConfig | None = None,
                       rng: np.random.Generator | None = None) -> tuple[LossInfo, np.ndarray]:
    """Smoothed-label BCE on noisy inputs plus a gradient penalty on clean interpolants.

    Returns the loss breakdown and the flat parameter gradient.
    """
    config = config or DiscriminatorConfig()
    real = np.asarray(real, dtype=float)
    fake = np.asarray(fake, dtype=float)
    if real.ndim != 2 or fake.ndim != 2 or real.shape[0] == 0 or fake.shape[0] == 0:
        raise EmptyBatch("both real and fake batches must be non-empty 2-D arrays")
    rng = rng if rng is not None else np.random.default_rng(seed)
    n_real = real.shape[0]
    sigma = config.input_noise_sigma
    x = np.concatenate([real, fake])
    if sigma > 0:
        x = x + rng.normal(0.0, sigma, x.shape)
    net.forward(x, mode="train", rng=rng)
    logits = net.output_preactivation.ravel()
    l_real, g_real = bce_with_logits(logits[:n_real], config.label_real)
    l_fake, g_fake = bce_with_logits(logits[n_real:], config.label_fake)
    grad = net.backward(np.concatenate([g_real, g_fake])[:, None], at_preactivation=True).copy()
    bce = l_real + l_fake

    penalty, gap = 0.0, float("nan")
    if config.gradient_penalty_coeff > 0:
        n = min(n_real, fake.shape[0])
        u = rng.uniform(0.0, 1.0, (n, 1))
        x_hat = u * real[:n] + (1.0 - u) * fake[:n]
        penalty, norms, pgrad = net.input_gradient_penalty(x_hat, 1.0, mode="train", rng=rng)
        grad += config.gradient_penalty_coeff * pgrad
        gap = float(np.mean(np.abs(norms - 1.0)))
    loss = bce + config.gradient_penalty_coeff * penalty
    return LossInfo(loss, bce, penalty, gap), grad


def evaluation_loss(real, fake, net: MLP, config: DiscriminatorConfig) -> float:
    """Noise-free, dropout-free BCE with the training targets; ``fake`` may be None."""
    net.forward(np.asarray(real, dtype=float), mode="eval")
    loss, _ = bce_with_logits(net.output_preactivation, config.label_real)
    if fake is not None:
        net.forward(np.asarray(fake, dtype=float), mode="eval")
        loss += bce_with_logits(net.output_preactivation, config.label_fake)[0]
    return loss


def interpolant_gradient_gap(real, fake, net: MLP, rng: np.random.Generator) -> float:
    """Mean |‖∇_x D(x̂)‖ - 1| over random interpolants, eval mode."""
    n = min(len(real), len(fake))
    u = rng.uniform(0.0, 1.0, (n, 1))
    x_hat = u * np.asarray(real[:n]) + (1.0 - u) * np.asarray(fake[:n])
    spec = net.spec
    if spec.output_activation != "sigmoid":
        raise ValueError("expects a sigmoid-head discriminator")
    d = net.forward(x_hat, mode="eval")
    g = net.backward_input(np.ones_like(d))
    return float(np.mean(np.abs(np.linalg.norm(g, axis=1) - 1.0)))


# -- estimator ---------------------------------------------------------------------


class GaitDiscriminator(ClassifierMixin, BaseEstimator):
    """Teacher-vs-student classifier trained with the published recipe.

    ``fit(X, y)`` takes features with label 1 for teacher (real) and 0 for
    student (fake) rows and runs ``n_updates`` minibatch steps.
    """

    def __init__(self, hidden=(64, 32), dropout_prob: float = 0.2, input_noise_sigma: float = 0.05,
                 label_real: float = 0.9, label_fake: float = 0.1, learning_rate: float = 1e-5,
                 gradient_penalty_coeff: float = 10.0, batch_size: int = 256, window: int = 1,
                 n_updates: int = 2000, seed: int = 0):
        self.hidden = hidden
        self.dropout_prob = dropout_prob
        self.input_noise_sigma = input_noise_sigma
        self.label_real = label_real
        self.label_fake = label_fake
        self.learning_rate = learning_rate
        self.gradient_penalty_coeff = gradient_penalty_coeff
        self.batch_size = batch_size
        self.window = window
        self.n_updates = n_updates
        self.seed = seed

    def _config(self) -> DiscriminatorConfig:
        return DiscriminatorConfig(
            hidden=tuple(self.hidden), dropout_prob=self.dropout_prob,
            input_noise_sigma=self.input_noise_sigma, label_real=self.label_real,
            label_fake=self.label_fake, learning_rate=self.learning_rate,
            gradient_penalty_coeff=self.gradient_penalty_coeff, batch_size=self.batch_size,
            window=self.window)

    def fit(self, X, y, callback: Callable[[int, LossInfo, "GaitDiscriminator"], None] | None = None):
        config = self._config()
        X, _ = check_observations(X, config.input_dim, "X")
        y = np.asarray(y).ravel()
        if y.shape[0] != X.shape[0]:
            raise ValueError("X and y have different lengths")
        real, fake = X[y == 1], X[y == 0]
        if len(real) == 0 or len(fake) == 0:
            raise EmptyBatch("fit needs both teacher (1) and student (0) rows")
        self.classes_ = np.array([0, 1])
        self.net_ = build_discriminator(config, self.seed)
        self.optimizer_ = Adam(self.net_, config.learning_rate)
        rng = np.random.default_rng(self.seed)
        self.history_ = []
        for k in range(1, self.n_updates + 1):
            self.partial_step(real, fake, rng)
            if callback is not None:
                callback(k, self.history_[-1], self)
        return self

    def partial_step(self, real, fake, rng: np.random.Generator) -> LossInfo:
        config = self._config()
        b = config.batch_size
        rb = real[rng.integers(0, len(real), b)]
        fb = fake[rng.integers(0, len(fake), b)]
        info, grad = discriminator_loss(rb, fb, self.net_, config=config, rng=rng)
        self.optimizer_.step(grad)
        self.history_.append(info)
        return info

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "net_")
        X, _ = check_observations(X, self.net_.spec.input_dim, "X")
        p = self.net_.forward(X, mode="eval").ravel()
        return np.column_stack([1.0 - p, p])

    def predict(self, X) -> np.ndarray:
        return (self.predict_proba(X)[:, 1] > 0.5).astype(int)

    def imitation_bonus(self, X) -> np.ndarray:
        return bonus_from_probability(self.predict_proba(X)[:, 1])


# -- scheduled training inside the student loop -----------------------------------


class ScheduledDiscriminator:
    """Discriminator state driven by the student's global step and update count.

    Reference frames are split once into train and holdout parts. A gradient
    step happens only when ``global_step >= start_step`` and the learner-update
    count is a multiple of ``update_every``; after ``patience`` consecutive
    holdout evaluations without improvement the network is frozen for good.
    Bonuses are always computed from ``snapshot``, which is replaced after
    each successful step and keeps serving once frozen.
    """

    def __init__(self, reference_frames: np.ndarray, config: DiscriminatorConfig | None = None,
                 seed: int = 0):
        self.config = config or DiscriminatorConfig()
        frames = stack_windows(reference_frames, self.config.window)
        rng = np.random.default_rng(seed)
        order = rng.permutation(frames.shape[0])
        n_hold = max(1, int(round(self.config.holdout_fraction * frames.shape[0])))
        if n_hold >= frames.shape[0]:
            raise EmptyBatch("reference too short for a train/holdout split")
        self.holdout_index = np.sort(order[:n_hold])
        self.train_index = np.sort(order[n_hold:])
        self.train_real = frames[self.train_index]
        self.holdout_real = frames[self.holdout_index]
        self.split_seed = seed
        self.net = build_discriminator(self.config, seed)
        self.optimizer = Adam(self.net, self.config.learning_rate)
        self.snapshot = self.net.copy()
        self.rng = np.random.default_rng(seed + 1)
        self.updates = 0
        self.frozen = False
        self.best_holdout = math.inf
        self.stale = 0
        self.log: list[dict] = []

    def should_update(self, global_step: int, learner_update_count: int) -> bool:
        return (not self.frozen and global_step >= self.config.start_step
                and learner_update_count % self.config.update_every == 0)

    def scheduled_update(self, global_step: int, learner_update_count: int,
                         sample_fake: Callable[[int, np.random.Generator], np.ndarray]) -> bool:
        """Maybe take one step; ``sample_fake(n, rng)`` returns student features.
        Returns True when a step was taken."""
        if not self.should_update(global_step, learner_update_count):
            return False
        cfg = self.config
        rb = self.train_real[self.rng.integers(0, len(self.train_real), cfg.batch_size)]
        fb = np.asarray(sample_fake(cfg.batch_size, self.rng), dtype=float)
        info, grad = discriminator_loss(rb, fb, self.net, config=cfg, rng=self.rng)
        if not (math.isfinite(info.loss) and np.all(np.isfinite(grad))):
            log.warning("non-finite discriminator loss at step %d; update skipped", global_step)
            return False
        self.optimizer.step(grad)
        self.snapshot = self.net.copy()
        self.updates += 1
        # validation uses the held-out teacher frames only; freshly sampled student
        # features would add sampling noise far larger than one step's progress
        holdout = evaluation_loss(self.holdout_real, None, self.net, cfg)
        if holdout < self.best_holdout:
            self.best_holdout = holdout
            self.stale = 0
        else:
            self.stale += 1
            if self.stale >= cfg.patience:
                self.frozen = True
                log.info("discriminator frozen after %d updates (step %d)", self.updates, global_step)
        self.log.append({"update": self.updates, "global_step": global_step,
                         "learner_updates": learner_update_count, "train_loss": info.loss,
                         "holdout_loss": holdout, "penalty": info.penalty,
                         "grad_norm_gap": info.grad_norm_gap, "frozen": int(self.frozen)})
        return True

    def bonus(self, features) -> np.ndarray:
        return np.atleast_1d(imitation_bonus(np.atleast_2d(features), self.snapshot))

    def write_log(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=DISC_METRICS_COLUMNS)
            writer.writeheader()
            writer.writerows(self.log)

    # -- persistence -----------------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {"disc.counters": np.array([self.updates, int(self.frozen), self.stale], dtype=np.int64),
                "disc.best": np.array([self.best_holdout]),
                "disc.snapshot": self.snapshot.get_flat()}

    def save(self, path, meta: dict | None = None) -> None:
        m = {"config": asdict(self.config), "split_seed": self.split_seed}
        m.update(meta or {})
        save_checkpoint(path, {"discriminator": self.net}, {"discriminator": self.optimizer.state},
                        self.state_arrays(), m)

    def load_state(self, path) -> None:
        ck = load_checkpoint(path)
        self.net.set_flat(ck.nets["discriminator"].get_flat())
        self.optimizer.state = ck.optimizers["discriminator"]
        self.optimizer.target = self.net.params.flat
        self.updates, frozen, self.stale = (int(v) for v in ck.arrays["disc.counters"])
        self.frozen = bool(frozen)
        self.best_holdout = float(ck.arrays["disc.best"][0])
        self.snapshot = self.net.copy()
        self.snapshot.set_flat(ck.arrays["disc.snapshot"])
