"""Planar seven-link biped: the student's body.

Torso plus two legs of thigh, shin and foot; six torque-driven joints (hip,
knee, ankle per side). Gait features use the same layout as the reduced-order
model: pelvis height, then each foot's sole point relative to the pelvis.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .physics2d import ArticulatedWorld, LinkSpec, NonFiniteState, WorldConfig
from .rom_env import ConfigError, EpisodeConfig, SteppedAfterDone, velocity_reward

OBS_DIM = 24
ACT_DIM = 6
JOINT_NAMES = ("hip_l", "knee_l", "ankle_l", "hip_r", "knee_r", "ankle_r")
TORSO, THIGH_L, SHIN_L, FOOT_L, THIGH_R, SHIN_R, FOOT_R = range(7)

OBSERVATION_LAYOUT = (
    ("root_height", "root_pitch", "root_vx", "root_vy", "root_omega")
    + tuple(f"angle_{j}" for j in JOINT_NAMES)
    + tuple(f"rate_{j}" for j in JOINT_NAMES)
    + ("contact_l", "contact_r", "foot_x_l", "foot_y_l", "foot_x_r", "foot_y_r", "target_speed")
)


@dataclass(frozen=True)
class BipedParams:
    torso_mass: float = 10.0
    torso_length: float = 0.6
    thigh_mass: float = 4.0
    thigh_length: float = 0.45
    shin_mass: float = 3.0
    shin_length: float = 0.5
    foot_mass: float = 1.0
    foot_length: float = 0.2
    ankle_height: float = 0.05
    heel_length: float = 0.05
    hip_torque: float = 150.0
    knee_torque: float = 150.0
    ankle_torque: float = 80.0
    joint_damping: float = 0.5

    def __post_init__(self):
        for key, value in self.__dict__.items():
            if key != "joint_damping" and not value > 0:
                raise ConfigError(key, f"must be > 0, got {value}")
        if self.heel_length >= self.foot_length:
            raise ConfigError("heel_length", "must be shorter than foot_length")

    @property
    def standing_height(self) -> float:
        """Pelvis height with straight legs and flat feet."""
        return self.thigh_length + self.shin_length + self.ankle_height


def default_episode_config(**overrides) -> EpisodeConfig:
    base = dict(target_speed=1.0, alpha=2.0, max_steps=1000, reward_mode="exponential", fall_height=0.9)
    base.update(overrides)
    return EpisodeConfig(**base)


def biped_links(p: BipedParams) -> list[LinkSpec]:
    half = 0.5 * p.torso_length
    toe = p.foot_length - p.heel_length
    links = [LinkSpec("torso", -1, (0.0, 0.0), (0.0, 0.0), p.torso_mass,
                      p.torso_mass * p.torso_length ** 2 / 12.0,
                      contacts=((0.0, half), (0.0, -half)))]
    for side, base in (("l", 1), ("r", 4)):
        links += [
            LinkSpec(f"thigh_{side}", 0, (0.0, -half), (0.0, -0.5 * p.thigh_length), p.thigh_mass,
                     p.thigh_mass * p.thigh_length ** 2 / 12.0, p.hip_torque, (-1.2, 1.6),
                     ((0.0, -p.thigh_length),)),
            LinkSpec(f"shin_{side}", base, (0.0, -p.thigh_length), (0.0, -0.5 * p.shin_length), p.shin_mass,
                     p.shin_mass * p.shin_length ** 2 / 12.0, p.knee_torque, (-2.4, 0.0)),
            LinkSpec(f"foot_{side}", base + 1, (0.0, -p.shin_length),
                     (0.5 * (toe - p.heel_length), -p.ankle_height), p.foot_mass,
                     p.foot_mass * (p.foot_length ** 2 + p.ankle_height ** 2) / 12.0, p.ankle_torque,
                     (-0.8, 0.8), ((-p.heel_length, -p.ankle_height), (toe, -p.ankle_height))),
        ]
    return links


def build_biped_world(params: BipedParams, world: WorldConfig, joint_angles=None,
                      joint_rates=None, x: float = 0.0) -> ArticulatedWorld:
    """Upright biped with flat feet resting on the ground."""
    q = np.zeros(9)
    if joint_angles is not None:
        q[3:] = joint_angles
    qd = np.zeros(9)
    if joint_rates is not None:
        qd[3:] = joint_rates
    q[0] = x
    q[1] = world.ground_height + params.standing_height + 0.5 * params.torso_length
    w = ArticulatedWorld(world, biped_links(params), q, qd, joint_damping=params.joint_damping)
    # lower the body until the lowest contact point touches the ground
    lowest = w.contact_positions()[:, 1].min() - world.ground_height
    w.q[1] -= lowest
    return w


def pelvis_position(world: ArticulatedWorld) -> np.ndarray:
    return world.point(TORSO, world.links[THIGH_L].joint_in_parent)


def sole_point(world: ArticulatedWorld, foot: int, ankle_height: float) -> np.ndarray:
    """Point on the sole directly below the ankle (in the foot frame)."""
    return world.point(foot, (0.0, -ankle_height))


def extract_gait_feature(world: ArticulatedWorld, params: BipedParams | None = None) -> np.ndarray:
    """[pelvis height, foot_l x/y, foot_r x/y] with feet relative to the pelvis (metres)."""
    params = params or BipedParams()
    pelvis = pelvis_position(world)
    left = sole_point(world, FOOT_L, params.ankle_height) - pelvis
    right = sole_point(world, FOOT_R, params.ankle_height) - pelvis
    return np.array([pelvis[1] - world.config.ground_height, left[0], left[1], right[0], right[1]])


def foot_contacts(world: ArticulatedWorld) -> tuple[bool, bool]:
    states = world.contacts
    by_link = {}
    for link, state in zip(world.cp_link, states):
        by_link[int(link)] = by_link.get(int(link), False) or state.in_contact
    return by_link.get(FOOT_L, False), by_link.get(FOOT_R, False)


def center_of_mass_velocity(world: ArticulatedWorld) -> np.ndarray:
    total = np.zeros(2)
    for body in world.bodies:
        total += body.mass * body.linear_velocity
    return total / world.masses.sum()


class BipedEnv:
    """Seven-link biped with a 24-d observation and 6-d normalized torque action."""

    obs_dim = OBS_DIM
    act_dim = ACT_DIM

    def __init__(self, config: EpisodeConfig | None = None, params: BipedParams | None = None,
                 world_config: WorldConfig | None = None):
        self.config = config or default_episode_config()
        self.params = params or BipedParams()
        self.world_config = world_config or WorldConfig()
        self.world: ArticulatedWorld | None = None
        self.steps = 0
        self.done = True
        self.terminated = False
        self.truncated = False
        self._torque_scale = np.array([self.params.hip_torque, self.params.knee_torque,
                                       self.params.ankle_torque] * 2)

    @property
    def nominal_height(self) -> float:
        return self.params.standing_height

    def reset(self, seed: int | None = None) -> np.ndarray:
        rng = np.random.default_rng(seed)
        angles = rng.uniform(-0.01, 0.01, 6)
        rates = rng.uniform(-0.01, 0.01, 6)
        # knees may not hyperextend past their limit
        angles[[1, 4]] = -np.abs(angles[[1, 4]])
        self.world = build_biped_world(self.params, self.world_config, angles, rates)
        self.steps = 0
        self.done = self.terminated = self.truncated = False
        return self.observation()

    def observation(self) -> np.ndarray:
        w = self.world
        pelvis = pelvis_position(w)
        pelvis_v = w.point_velocity(TORSO, w.links[THIGH_L].joint_in_parent)
        feature = extract_gait_feature(w, self.params)
        left, right = foot_contacts(w)
        return np.concatenate([
            [pelvis[1] - w.config.ground_height, w.q[2], pelvis_v[0], pelvis_v[1], w.qd[2]],
            w.q[3:], w.qd[3:], [float(left), float(right)], feature[1:], [self.config.target_speed],
        ])

    def com_velocity(self) -> float:
        return float(center_of_mass_velocity(self.world)[0])

    def torso_height(self) -> float:
        return float(self.world.q[1] - self.world.config.ground_height)

    def step(self, action) -> tuple[np.ndarray, float, bool]:
        if self.done:
            raise SteppedAfterDone("episode finished; call reset()")
        a = np.clip(np.asarray(action, dtype=float).reshape(ACT_DIM), -1.0, 1.0)
        blew_up = False
        try:
            self.world.step(a * self._torque_scale)
        except NonFiniteState:
            blew_up = True
        self.steps += 1
        if blew_up:
            obs = np.nan_to_num(self.observation(), nan=0.0, posinf=0.0, neginf=0.0)
            reward = 0.0
        else:
            obs = self.observation()
            reward = velocity_reward(self.com_velocity(), self.config.target_speed, self.config.alpha)
        self.terminated = blew_up or self.torso_height() < self.config.fall_height
        self.truncated = not self.terminated and self.steps >= self.config.max_steps
        self.done = self.terminated or self.truncated
        return obs, reward, self.done

    def gait_feature(self) -> np.ndarray:
        return extract_gait_feature(self.world, self.params)


def normalize_feature(feature: np.ndarray, height: float) -> np.ndarray:
    """Scale a gait feature (or a stack of them) by the mechanism's nominal height."""
    if not height > 0 or not math.isfinite(height):
        raise ValueError("normalization height must be positive and finite")
    return np.asarray(feature, dtype=float) / height
