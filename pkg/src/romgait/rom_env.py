"""Episodic environment around the 4-DOF spring-leg walker (the teacher's world)."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .physics2d import (
    DegenerateLeg,
    LegSpec,
    NonFiniteState,
    RigidBodyState,
    SpringLegWorld,
    WorldConfig,
)

OBS_DIM = 20
ACT_DIM = 2
FEATURE_DIM = 5
REWARD_MODES = ("exponential", "raw_forward_velocity")

OBSERVATION_LAYOUT = (
    "body_height", "body_vx", "body_vy",
    "spring_length_l", "spring_length_r", "spring_rate_l", "spring_rate_r",
    "hip_angle_l", "hip_angle_r", "hip_rate_l", "hip_rate_r",
    "foot_x_l", "foot_y_l", "foot_x_r", "foot_y_r",
    "foot_vx_l", "foot_vy_l", "foot_vx_r", "foot_vy_r",
    "target_speed",
)


class ConfigError(ValueError):
    """Invalid configuration value; ``key`` names the offending entry."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


class SteppedAfterDone(RuntimeError):
    pass


@dataclass(frozen=True)
class EpisodeConfig:
    target_speed: float = 1.0
    alpha: float = 2.0
    max_steps: int = 1000
    reward_mode: str = "raw_forward_velocity"
    fall_height: float = 0.4

    def __post_init__(self):
        if not self.alpha > 0:
            raise ConfigError("alpha", f"must be > 0, got {self.alpha}")
        if int(self.max_steps) != self.max_steps or self.max_steps < 1:
            raise ConfigError("max_steps", f"must be an integer >= 1, got {self.max_steps}")
        if self.reward_mode not in REWARD_MODES:
            raise ConfigError("reward_mode", f"must be one of {REWARD_MODES}, got {self.reward_mode!r}")
        if not math.isfinite(self.target_speed):
            raise ConfigError("target_speed", "must be finite")


@dataclass(frozen=True)
class RomParams:
    mass: float = 10.0
    rest_length: float = 1.0
    stiffness: float = 2000.0
    damping: float = 10.0
    hip_torque_limit: float = 100.0
    foot_mass_ratio: float = 0.05
    body_half_size: float = 0.1
    hip_range: float = 1.0

    def __post_init__(self):
        for key in ("mass", "rest_length", "stiffness", "hip_torque_limit", "foot_mass_ratio", "body_half_size",
                    "hip_range"):
            if not getattr(self, key) > 0:
                raise ConfigError(key, f"must be > 0, got {getattr(self, key)}")
        if self.damping < 0:
            raise ConfigError("damping", "must be >= 0")

    def standing_height(self, gravity: float = 9.81) -> float:
        """Body height with both legs vertical and sharing the weight statically."""
        return self.rest_length - self.mass * gravity / (2.0 * self.stiffness)


def velocity_reward(v_com: float, v_target: float, alpha: float) -> float:
    """exp(-alpha |v_com - v_target|), bounded in (0, 1]."""
    return math.exp(-alpha * abs(v_com - v_target))


def build_rom_world(params: RomParams, world: WorldConfig, hip_angles=(0.0, 0.0),
                    hip_rates=(0.0, 0.0), x: float = 0.0) -> SpringLegWorld:
    """Standing ROM: body at static height, both feet on the ground."""
    g = -world.gravity[1]
    height = params.standing_height(g) + world.ground_height
    m = params.mass
    s = params.body_half_size
    body = RigidBodyState([x, height], 0.0, [0.0, 0.0], 0.0, m, m * (2 * s) ** 2 / 6.0)
    feet = []
    for phi, rate in zip(hip_angles, hip_rates):
        depth = height - world.ground_height
        length = depth / math.cos(phi)
        foot_x = x + length * math.sin(phi)
        feet.append(RigidBodyState([foot_x, world.ground_height], 0.0, [length * rate, 0.0], 0.0,
                                   params.foot_mass_ratio * m, 1e-6, massless_limit=True))
    legs = [LegSpec(0, i + 1, params.rest_length, params.stiffness, params.damping,
                    params.hip_torque_limit, (-params.hip_range, params.hip_range)) for i in range(2)]
    contacts = [(1, 0.0, 0.0), (2, 0.0, 0.0), (0, -s, -s), (0, s, -s)]
    return SpringLegWorld(world, [body] + feet, legs, contacts)


def extract_gait_feature(world: SpringLegWorld) -> np.ndarray:
    """[y_com, x_l, y_l, x_r, y_r] with foot positions relative to the body (metres)."""
    body = world.pos[0]
    rel = world.pos[1:3] - body
    return np.array([body[1] - world.config.ground_height, rel[0, 0], rel[0, 1], rel[1, 0], rel[1, 1]])


def rom_observation(world: SpringLegWorld, target_speed: float) -> np.ndarray:
    body, vel = world.pos[0], world.vel[0]
    legs = world.legs
    rel = world.pos[1:3] - body
    rel_v = world.vel[1:3] - vel
    return np.array([
        body[1] - world.config.ground_height, vel[0], vel[1],
        legs[0].current_length, legs[1].current_length,
        legs[0].length_rate, legs[1].length_rate,
        legs[0].hip_angle, legs[1].hip_angle,
        legs[0].hip_angular_velocity, legs[1].hip_angular_velocity,
        rel[0, 0], rel[0, 1], rel[1, 0], rel[1, 1],
        rel_v[0, 0], rel_v[0, 1], rel_v[1, 0], rel_v[1, 1],
        target_speed,
    ])


class RomEnv:
    """Reduced-order walker with a 20-d observation and 2-d hip torque action in [-1, 1]."""

    obs_dim = OBS_DIM
    act_dim = ACT_DIM

    def __init__(self, config: EpisodeConfig | None = None, params: RomParams | None = None,
                 world_config: WorldConfig | None = None):
        self.config = config or EpisodeConfig()
        self.params = params or RomParams()
        self.world_config = world_config or WorldConfig()
        self.world: SpringLegWorld | None = None
        self.steps = 0
        self.done = True
        self.terminated = False
        self.truncated = False

    @property
    def nominal_height(self) -> float:
        return self.params.standing_height(-self.world_config.gravity[1])

    def reset(self, seed: int | None = None) -> np.ndarray:
        rng = np.random.default_rng(seed)
        angles = rng.uniform(-0.01, 0.01, 2)
        rates = rng.uniform(-0.01, 0.01, 2)
        self.world = build_rom_world(self.params, self.world_config, angles, rates)
        self.steps = 0
        self.done = self.terminated = self.truncated = False
        return self.observation()

    def observation(self) -> np.ndarray:
        return rom_observation(self.world, self.config.target_speed)

    def reward(self) -> float:
        v_com = float(self.world.vel[0, 0])
        if self.config.reward_mode == "exponential":
            return velocity_reward(v_com, self.config.target_speed, self.config.alpha)
        return v_com

    def step(self, action) -> tuple[np.ndarray, float, bool]:
        if self.done:
            raise SteppedAfterDone("episode finished; call reset()")
        a = np.clip(np.asarray(action, dtype=float).reshape(ACT_DIM), -1.0, 1.0)
        collapsed = False
        try:
            self.world.step(a * self.params.hip_torque_limit)
        except (DegenerateLeg, NonFiniteState):
            collapsed = True
        self.steps += 1
        if collapsed:
            obs = np.nan_to_num(self.observation(), nan=0.0, posinf=0.0, neginf=0.0)
            reward = 0.0
        else:
            obs = self.observation()
            reward = self.reward()
        self.terminated = collapsed or obs[0] < self.config.fall_height
        self.truncated = not self.terminated and self.steps >= self.config.max_steps
        self.done = self.terminated or self.truncated
        return obs, reward, self.done

    def gait_feature(self) -> np.ndarray:
        return extract_gait_feature(self.world)
