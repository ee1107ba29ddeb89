"""Run configuration: nested dataclasses, YAML round-trip and content hashing.

Precedence when building a config is flags > environment > file > defaults.
Environment overrides use the ``REFLEXSIM__SECTION__KEY=value`` form.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import yaml

ENV_PREFIX = "REFLEXSIM__"

CHANNELS = (
    "wheel_L", "wheel_R", "hipx_L", "hipx_R", "hipy_L", "hipy_R", "knee_L", "knee_R",
)
WHEEL_CHANNELS = (0, 1)
LEG_CHANNELS = (2, 3, 4, 5, 6, 7)


class ConfigError(ValueError):
    pass


@dataclass
class GeometryConfig:
    half_length: float = 0.4
    half_width: float = 0.3
    delta_safe: float = 0.1


@dataclass
class SimConfig:
    dt: float = 0.02
    horizon: float = 6.0
    obstacle_radius: float = 0.15
    # actuation envelopes (m/s^2, rad/s^2) and speed caps
    low_accel: float = 1.5
    high_accel_x: float = 5.5
    high_accel_y: float = 3.0
    low_yaw_accel: float = 4.0
    high_yaw_accel: float = 10.0
    low_vmax: float = 2.0
    high_vmax: float = 4.5
    low_yaw_rate_max: float = 1.5
    high_yaw_rate_max: float = 3.0
    instability_speed_factor: float = 1.25
    instability_yaw_rate: float = 8.0
    # rolling-dominant lateral limit
    rolling_power_fraction: float = 0.7
    rolling_lateral_factor: float = 0.3
    # wheel-lock braking surrogate
    lock_decel_threshold: float = 3.0
    lock_decel_gain: float = 1.4
    friction: float = 0.55
    gravity: float = 9.81
    # surrogate actuator model
    base_mass: float = 25.0
    wheel_radius: float = 0.1
    wheel_track_half: float = 0.25
    # torque per unit body accel (ax, ay, yaw accel), one row per channel; N*m per m/s^2
    torque_gain: list = field(default_factory=lambda: [
        [1.1, 0.0, -0.25], [1.1, 0.0, 0.25],
        [0.0, 3.0, 0.0], [0.0, 3.0, 0.0],
        [0.2, 0.5, 0.1], [0.2, 0.5, -0.1],
        [0.1, 1.5, 0.0], [0.1, 1.5, 0.0],
    ])
    # joint speed per unit body velocity (vx, vy, yaw rate); wheels derive from radius/track
    leg_speed_gain: list = field(default_factory=lambda: [
        [0.0, 2.0, 0.0], [0.0, 2.0, 0.0],
        [0.3, 0.5, 0.3], [0.3, 0.5, -0.3],
        [0.2, 1.5, 0.0], [0.2, 1.5, 0.0],
    ])
    idle_leg_torque: float = 2.0
    wheel_rolling_torque: float = 0.8
    # agile stance keeps leg joints cycling at this rate while the HIGH expert is active
    high_stance_joint_speed: float = 1.5


@dataclass
class ThreatConfig:
    v_th: float = 0.5
    d_th: float = 1.0
    kappa_th: float = 0.5
    d_safe: float = 0.4
    fp_deadband: float = 0.2
    gate: str = "action"  # "action" or "observation"


@dataclass
class SpawnConfig:
    distance: tuple = (3.0, 5.0)
    nonthreat_fraction: float = 0.05
    aim_jitter: float = 0.2
    noncentral_miss: tuple = (1.2, 2.0)
    still_speed_max: float = 0.04
    tr_min: float = 0.1


@dataclass
class RandomizationConfig:
    enabled: bool = True
    actuator_gain_factor: tuple = (0.7, 1.3)
    external_push: tuple = (-10.0, 10.0)
    push_duration: float = 0.1
    base_mass_delta: tuple = (-1.0, 3.0)
    friction_factor: tuple = (0.3, 0.8)


@dataclass
class RewardConfig:
    R_succ: float = 10.0
    R_fail: float = -10.0
    lambda_fp: float = 0.3
    k_track: float = 0.5
    k_smooth: float = 0.05
    k_power: float = 0.001
    # regularizer weights while training the high-level policy over frozen experts
    high_level_k_track: float = 0.01
    high_level_k_smooth: float = 0.005
    high_level_k_power: float = 0.006
    # potential-based shaping on the predicted miss distance (stage 2 only)
    shape_weight: float = 10.0
    shape_cap: float = 1.0

    def for_high_level(self) -> "RewardConfig":
        """Copy whose k_* weights are the high-level ones."""
        return dataclasses.replace(self, k_track=self.high_level_k_track, k_smooth=self.high_level_k_smooth,
                                   k_power=self.high_level_k_power)


@dataclass
class CurriculumConfig:
    bands: list = field(default_factory=lambda: [
        [2.5, 3.5], [2.0, 3.0], [1.5, 2.5], [1.0, 2.0], [0.5, 1.5], [0.0, 1.0],
    ])
    window: int = 200
    promote_threshold: float = 0.8
    replay_fraction: float = 0.5


@dataclass
class NetConfig:
    expert_hidden: list = field(default_factory=lambda: [256, 128])
    high_hidden: list = field(default_factory=lambda: [256, 128])
    value_hidden: list = field(default_factory=lambda: [256, 128])
    init_logstd: float = -0.5
    low_mode_prior: float = 0.0  # initial LOW-over-HIGH logit gap of the mode head
    gumbel_temp_start: float = 1.0
    gumbel_temp_end: float = 0.3


@dataclass
class PPOConfig:
    gamma: float = 0.99
    lam: float = 0.95
    clip_eps: float = 0.2
    entropy_coef: float = 0.005
    mode_entropy_coef: float = 0.05  # categorical entropy bonus on mode decisions
    value_coef: float = 0.5
    epochs: int = 5
    minibatch: int = 2048
    lr: float = 3e-4
    max_grad_norm: float = 1.0


@dataclass
class TrainConfig:
    seed: int = 0
    lane_size: int = 32
    lanes: int = 4
    rollout_steps: int = 64
    stage1_iterations: int = 150
    stage2_iterations: int = 600
    mode_hold: int = 10  # triggered steps a sampled mode is kept during stage-2 rollouts
    stage2_extra_noncentral: float = 0.15  # additional NON_CENTRAL spawns in stage-2 rollouts
    checkpoint_every: int = 50
    divergence_window: int = 20
    divergence_drop: float = 1.0  # relative to the best moving average
    stage1_hold: tuple = (0.5, 2.0)
    stage1_ramp: float = 0.6
    stage1_brake_prob: float = 0.25
    stage1_episode: float = 6.0


@dataclass
class EvalConfig:
    episodes_per_bin: int = 1000
    seeds: int = 5
    bin_edges: list = field(default_factory=lambda: [0.0, 1.0, 2.0, 3.0])
    nonthreat_episodes: int = 500
    dt_start: float = 0.3
    lane_size: int = 50
    feature_window: int = 10


@dataclass
class Config:
    geometry: GeometryConfig = field(default_factory=GeometryConfig)
    sim: SimConfig = field(default_factory=SimConfig)
    threat: ThreatConfig = field(default_factory=ThreatConfig)
    spawn: SpawnConfig = field(default_factory=SpawnConfig)
    randomization: RandomizationConfig = field(default_factory=RandomizationConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)
    curriculum: CurriculumConfig = field(default_factory=CurriculumConfig)
    net: NetConfig = field(default_factory=NetConfig)
    ppo: PPOConfig = field(default_factory=PPOConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def content_hash(self) -> str:
        return config_hash(self.to_dict())

    def model_hash(self) -> str:
        """Hash of everything that shapes a trained policy; evaluation settings are excluded."""
        data = self.to_dict()
        data.pop("eval")
        return config_hash(data)

    def replace(self, **overrides: Any) -> "Config":
        """Copy with dotted-key overrides, e.g. ``replace(**{"train.seed": 3})``."""
        data = self.to_dict()
        for key, value in overrides.items():
            _set_dotted(data, key, value)
        return config_from_dict(data)


def _plain(obj: Any) -> Any:
    if isinstance(obj, Mapping):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def config_hash(data: Mapping) -> str:
    blob = json.dumps(_plain(data), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def _set_dotted(data: dict, key: str, value: Any) -> None:
    parts = key.split(".")
    node = data
    for p in parts[:-1]:
        if p not in node or not isinstance(node[p], dict):
            raise ConfigError(f"unknown config section {p!r} in {key!r}")
        node = node[p]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config key {key!r}")
    node[parts[-1]] = value


def config_from_dict(data: Mapping) -> Config:
    sections = {f.name: f.type for f in dataclasses.fields(Config)}
    kwargs = {}
    for name, sub in data.items():
        if name not in sections:
            raise ConfigError(f"unknown config section {name!r}")
        cls = globals()[sections[name]] if isinstance(sections[name], str) else sections[name]
        known = {f.name: f for f in dataclasses.fields(cls)}
        if not isinstance(sub, Mapping):
            raise ConfigError(f"section {name!r} must be a mapping")
        vals = {}
        for k, v in sub.items():
            if k not in known:
                raise ConfigError(f"unknown config key {name}.{k}")
            default = getattr(cls(), k)
            if isinstance(default, tuple):
                v = tuple(v)
            elif isinstance(default, bool):
                v = bool(v)
            elif isinstance(default, float) and isinstance(v, int):
                v = float(v)
            vals[k] = v
        kwargs[name] = cls(**vals)
    return Config(**kwargs)


def dump_config(cfg: Config, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))


def dumps_config(cfg: Config) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)


def loads_config(text: str) -> Config:
    data = yaml.safe_load(text) or {}
    if not isinstance(data, Mapping):
        raise ConfigError("config root must be a mapping")
    return config_from_dict(data)


def load_config(path: str | Path | None = None, overrides: Mapping[str, Any] | None = None,
                environ: Mapping[str, str] | None = None) -> Config:
    if path is None:
        cfg = Config()
    else:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        try:
            cfg = loads_config(p.read_text())
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {p}: {exc}") from exc
    env = os.environ if environ is None else environ
    env_over = {}
    for k, v in env.items():
        if k.startswith(ENV_PREFIX):
            dotted = k[len(ENV_PREFIX):].lower().replace("__", ".")
            env_over[dotted] = yaml.safe_load(v)
    merged = dict(env_over)
    merged.update(overrides or {})
    if merged:
        cfg = cfg.replace(**merged)
    return cfg


def copy_config(cfg: Config) -> Config:
    return copy.deepcopy(cfg)
