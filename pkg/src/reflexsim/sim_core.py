"""Planar wheeled-legged base, spherical projectiles and their geometry.

Every state container holds numpy arrays with an optional leading batch axis,
so the same functions step one robot or a lane of robots.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from enum import IntEnum

import numpy as np

from .config import (
    LEG_CHANNELS,
    WHEEL_CHANNELS,
    GeometryConfig,
    SimConfig,
    SpawnConfig,
)

N_CHANNELS = 8


class Mode(IntEnum):
    LOW = 0
    HIGH = 1


class Kind(IntEnum):
    THREAT = 0
    STILL = 1
    NON_CENTRAL = 2


class Outcome(IntEnum):
    RUNNING = 0
    SUCCESS = 1
    COLLISION = 2
    INSTABILITY = 3
    TIMEOUT = 4


class InvalidCommandError(ValueError):
    """Raised when a non-finite acceleration command reaches the simulator."""


RobotGeometry = GeometryConfig


@dataclass
class RobotState:
    p: np.ndarray
    yaw: np.ndarray
    v_world: np.ndarray
    yaw_rate: np.ndarray
    mode_active: np.ndarray
    channel_vel: np.ndarray
    channel_torque: np.ndarray
    wheel_locked: np.ndarray
    airborne_timer: np.ndarray

    def __getitem__(self, idx) -> "RobotState":
        return RobotState(**{f.name: getattr(self, f.name)[idx] for f in fields(self)})

    def copy(self) -> "RobotState":
        return RobotState(**{f.name: np.array(getattr(self, f.name)) for f in fields(self)})


@dataclass
class Obstacle:
    p_o: np.ndarray
    v_o: np.ndarray
    radius: np.ndarray
    kind: np.ndarray
    spawn_time: np.ndarray
    reaction_time: np.ndarray = field(default_factory=lambda: np.array(np.nan))

    def __getitem__(self, idx) -> "Obstacle":
        return Obstacle(**{f.name: getattr(self, f.name)[idx] for f in fields(self)})

    def copy(self) -> "Obstacle":
        return Obstacle(**{f.name: np.array(getattr(self, f.name)) for f in fields(self)})


@dataclass
class Dynamics:
    """Per-episode physical parameters; nominal values unless randomized."""

    gain: np.ndarray
    mass_scale: np.ndarray
    friction: np.ndarray
    push: np.ndarray
    push_start: np.ndarray
    push_end: np.ndarray

    @classmethod
    def nominal(cls, cfg: SimConfig, shape: tuple = ()) -> "Dynamics":
        return cls(
            gain=np.ones(shape),
            mass_scale=np.ones(shape),
            friction=np.full(shape, cfg.friction),
            push=np.zeros(shape + (2,)),
            push_start=np.full(shape, np.inf),
            push_end=np.full(shape, np.inf),
        )


@dataclass
class CpaPrediction:
    d_min_pred: np.ndarray
    t_cpa: np.ndarray


def stack(items: list) -> object:
    """Stack a list of same-typed state containers along a new batch axis."""
    cls = type(items[0])
    return cls(**{f.name: np.stack([np.asarray(getattr(it, f.name)) for it in items])
                  for f in fields(cls)})


def assign(dst, idx, src) -> None:
    """In-place ``dst[idx] = src`` for state containers."""
    for f in fields(dst):
        getattr(dst, f.name)[idx] = getattr(src, f.name)


def wrap_angle(a):
    """Wrap to (-pi, pi]."""
    w = np.mod(np.asarray(a, dtype=float) + np.pi, 2.0 * np.pi) - np.pi
    return np.where(w == -np.pi, np.pi, w)


def rotate(vec, yaw):
    c, s = np.cos(yaw), np.sin(yaw)
    x, y = vec[..., 0], vec[..., 1]
    return np.stack([c * x - s * y, s * x + c * y], axis=-1)


def to_body(vec, yaw):
    return rotate(vec, -np.asarray(yaw))


# ---------------------------------------------------------------- actuators

def _torque_gain(cfg: SimConfig) -> np.ndarray:
    return np.asarray(cfg.torque_gain, dtype=float)


def _leg_speed_gain(cfg: SimConfig) -> np.ndarray:
    return np.asarray(cfg.leg_speed_gain, dtype=float)


def channel_model(v_body, yaw_rate, accel_body, mode, wheel_locked, cfg: SimConfig,
                  mass_scale=1.0):
    """Map body motion to surrogate (velocity, torque) per actuator channel."""
    v_body = np.asarray(v_body, dtype=float)
    shape = v_body.shape[:-1]
    vel = np.zeros(shape + (N_CHANNELS,))
    r, b = cfg.wheel_radius, cfg.wheel_track_half
    wl = np.asarray(wheel_locked, dtype=bool)
    vel[..., 0] = np.where(wl, 0.0, (v_body[..., 0] - yaw_rate * b) / r)
    vel[..., 1] = np.where(wl, 0.0, (v_body[..., 0] + yaw_rate * b) / r)
    motion = np.concatenate([v_body, np.asarray(yaw_rate, dtype=float)[..., None]], axis=-1)
    stance = np.where(np.asarray(mode) == Mode.HIGH, cfg.high_stance_joint_speed, 0.0)
    vel[..., 2:] = motion @ _leg_speed_gain(cfg).T + np.asarray(stance)[..., None]

    tau = (np.asarray(accel_body, dtype=float) @ _torque_gain(cfg).T) * np.asarray(mass_scale)[..., None]
    tau[..., 2:] += cfg.idle_leg_torque
    tau[..., :2] += cfg.wheel_rolling_torque * np.sign(vel[..., :2])
    return vel, tau


def channel_power(channel_torque, channel_vel):
    return np.abs(np.asarray(channel_torque) * np.asarray(channel_vel))


def total_power(channel_torque, channel_vel):
    return channel_power(channel_torque, channel_vel).sum(axis=-1)


def wheel_power_fraction(channel_torque, channel_vel):
    pw = channel_power(channel_torque, channel_vel)
    total = pw.sum(axis=-1)
    wheel = pw[..., list(WHEEL_CHANNELS)].sum(axis=-1)
    safe = np.where(total > 0, total, 1.0)
    return np.where(total > 0, wheel / safe, 0.0)


def idle_torque_effort(cfg: SimConfig) -> float:
    """Aggregate standing torque effort (sum of |tau| at rest)."""
    return cfg.idle_leg_torque * len(LEG_CHANNELS)


def initial_state(cfg: SimConfig, shape: tuple = ()) -> RobotState:
    zeros2 = np.zeros(shape + (2,))
    zero = np.zeros(shape)
    mode = np.zeros(shape, dtype=int)
    locked = np.zeros(shape, dtype=bool)
    vel, tau = channel_model(zeros2, zero, np.zeros(shape + (3,)), mode, locked, cfg)
    return RobotState(
        p=zeros2.copy(), yaw=zero.copy(), v_world=zeros2.copy(), yaw_rate=zero.copy(),
        mode_active=mode, channel_vel=vel, channel_torque=tau, wheel_locked=locked,
        airborne_timer=zero.copy(),
    )


def mode_limits(mode, cfg: SimConfig):
    high = np.asarray(mode) == Mode.HIGH
    ax_max = np.where(high, cfg.high_accel_x, cfg.low_accel)
    ay_max = np.where(high, cfg.high_accel_y, cfg.low_accel)
    aw_max = np.where(high, cfg.high_yaw_accel, cfg.low_yaw_accel)
    vmax = np.where(high, cfg.high_vmax, cfg.low_vmax)
    wmax = np.where(high, cfg.high_yaw_rate_max, cfg.low_yaw_rate_max)
    return ax_max, ay_max, aw_max, vmax, wmax


def clamp_accel(accel_cmd, mode, cfg: SimConfig):
    """Project a body-frame (ax, ay, yaw accel) command into the mode envelope.

    LOW is an isotropic disc, HIGH an axis-aligned ellipse; both scale the planar
    part radially so the direction of the command is kept.
    """
    a = np.asarray(accel_cmd, dtype=float)
    ax_max, ay_max, aw_max, _, _ = mode_limits(mode, cfg)
    q = np.sqrt((a[..., 0] / ax_max) ** 2 + (a[..., 1] / ay_max) ** 2)
    scale = np.where(q > 1.0, 1.0 / np.where(q > 1.0, q, 1.0), 1.0)
    out = np.empty_like(a)
    out[..., 0] = a[..., 0] * scale
    out[..., 1] = a[..., 1] * scale
    out[..., 2] = np.clip(a[..., 2], -aw_max, aw_max)
    return out


def step(state: RobotState, accel_cmd, mode, cfg: SimConfig, dt: float | None = None,
         dyn: Dynamics | None = None, t: float | np.ndarray = 0.0) -> RobotState:
    """Advance the base by one control period under a body-frame accel command."""
    dt = cfg.dt if dt is None else dt
    a_cmd = np.asarray(accel_cmd, dtype=float)
    if not np.all(np.isfinite(a_cmd)):
        raise InvalidCommandError(f"non-finite acceleration command: {a_cmd}")
    shape = np.shape(state.yaw)
    mode = np.broadcast_to(np.asarray(mode, dtype=int), shape)
    if dyn is None:
        dyn = Dynamics.nominal(cfg, shape)
    high = mode == Mode.HIGH

    a = clamp_accel(a_cmd * np.asarray(dyn.gain)[..., None], mode, cfg)
    ax_max, ay_max, _, vmax, wmax = mode_limits(mode, cfg)

    v_body = to_body(state.v_world, state.yaw)
    rho = wheel_power_fraction(state.channel_torque, state.channel_vel)
    rolling = rho > cfg.rolling_power_fraction
    lat_lim = ay_max * cfg.rolling_lateral_factor
    a[..., 1] = np.where(rolling, np.clip(a[..., 1], -lat_lim, lat_lim), a[..., 1])

    braking = a[..., 0] * v_body[..., 0] < 0.0
    locked = high & braking & (np.abs(a[..., 0]) > cfg.lock_decel_threshold) & (np.abs(v_body[..., 0]) > 0.05)
    traction = np.asarray(dyn.friction) * cfg.gravity * np.where(locked, cfg.lock_decel_gain, 1.0)
    decel_lim = np.minimum(ax_max, traction)
    a[..., 0] = np.where(braking, np.clip(a[..., 0], -decel_lim, decel_lim), a[..., 0])

    vb_new = v_body + a[..., :2] * dt
    # a locked wheel pair skids to rest and cannot drive the base backwards
    flipped = locked & (vb_new[..., 0] * v_body[..., 0] < 0.0)
    vb_new[..., 0] = np.where(flipped, 0.0, vb_new[..., 0])

    t = np.asarray(t, dtype=float)
    pushing = (t >= dyn.push_start) & (t < dyn.push_end)
    push_body = to_body(np.where(pushing[..., None], dyn.push, 0.0), state.yaw)
    vb_new = vb_new + push_body * dt

    old_speed = np.linalg.norm(v_body, axis=-1)
    new_speed = np.linalg.norm(vb_new, axis=-1)
    cap = np.maximum(vmax, np.minimum(old_speed, cfg.high_vmax))
    over = new_speed > cap
    vb_new = vb_new * np.where(over, cap / np.where(over, new_speed, 1.0), 1.0)[..., None]

    w_new = np.clip(state.yaw_rate + a[..., 2] * dt, -wmax, wmax)
    v_world_new = rotate(vb_new, state.yaw)
    p_new = state.p + 0.5 * (state.v_world + v_world_new) * dt
    yaw_new = wrap_angle(state.yaw + 0.5 * (state.yaw_rate + w_new) * dt)

    vb_out = to_body(v_world_new, yaw_new)
    vel, tau = channel_model(vb_out, w_new, a, mode, locked, cfg, dyn.mass_scale)
    return RobotState(
        p=p_new, yaw=yaw_new, v_world=v_world_new, yaw_rate=w_new,
        mode_active=np.array(mode, dtype=int), channel_vel=vel, channel_torque=tau,
        wheel_locked=locked, airborne_timer=np.zeros(shape),
    )


def step_obstacle(obs: Obstacle, dt: float) -> Obstacle:
    return replace(obs, p_o=obs.p_o + obs.v_o * dt)


# ---------------------------------------------------------------- geometry

def box_signed_distance(point, half_length, half_width):
    """Signed distance from body-frame points to the centred box; negative inside."""
    pt = np.asarray(point, dtype=float)
    qx = np.abs(pt[..., 0]) - half_length
    qy = np.abs(pt[..., 1]) - half_width
    outside = np.hypot(np.maximum(qx, 0.0), np.maximum(qy, 0.0))
    inside = np.minimum(np.maximum(qx, qy), 0.0)
    return outside + inside


def collision_distance(state: RobotState, geom: GeometryConfig, obs: Obstacle):
    """Clearance between the yaw-oriented body box and the sphere (negative = penetration)."""
    rel = to_body(np.asarray(obs.p_o) - state.p, state.yaw)
    return box_signed_distance(rel, geom.half_length, geom.half_width) - obs.radius


def _point_segment_distance(pt, a, b):
    ab = b - a
    denom = np.sum(ab * ab, axis=-1)
    t = np.where(denom > 0, np.sum((pt - a) * ab, axis=-1) / np.where(denom > 0, denom, 1.0), 0.0)
    t = np.clip(t, 0.0, 1.0)
    closest = a + t[..., None] * ab
    return np.linalg.norm(pt - closest, axis=-1)


def _segment_hits_box(a, b, hl, hw):
    d = b - a
    t0 = np.zeros(a.shape[:-1])
    t1 = np.ones(a.shape[:-1])
    hit = np.ones(a.shape[:-1], dtype=bool)
    for axis, h in ((0, hl), (1, hw)):
        da = d[..., axis]
        pa = a[..., axis]
        par = np.abs(da) < 1e-15
        hit &= ~(par & (np.abs(pa) > h))
        safe = np.where(par, 1.0, da)
        ta = (-h - pa) / safe
        tb = (h - pa) / safe
        lo = np.where(par, -np.inf, np.minimum(ta, tb))
        hi = np.where(par, np.inf, np.maximum(ta, tb))
        t0 = np.maximum(t0, lo)
        t1 = np.minimum(t1, hi)
    return hit & (t0 <= t1)


def segment_box_signed_distance(a, b, half_length, half_width):
    """Minimum signed distance from a body-frame segment to the centred box."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    sa = box_signed_distance(a, half_length, half_width)
    sb = box_signed_distance(b, half_length, half_width)
    best = np.minimum(sa, sb)
    for cx, cy in ((1, 1), (1, -1), (-1, 1), (-1, -1)):
        corner = np.broadcast_to(np.array([cx * half_length, cy * half_width]), a.shape)
        best = np.minimum(best, _point_segment_distance(corner, a, b))
    hits = _segment_hits_box(a, b, half_length, half_width)
    return np.where(hits, np.minimum(np.minimum(sa, sb), 0.0), best)


def swept_clearance(state0: RobotState, obs0: Obstacle, state1: RobotState, obs1: Obstacle,
                    geom: GeometryConfig):
    """Clearance minimised over one step, with relative motion taken as linear in the body frame.

    Catches fast projectiles that would tunnel through the box between samples.
    """
    a = to_body(np.asarray(obs0.p_o) - state0.p, state0.yaw)
    b = to_body(np.asarray(obs1.p_o) - state1.p, state1.yaw)
    return segment_box_signed_distance(a, b, geom.half_length, geom.half_width) - obs1.radius


def cpa_predict(p_rel, v_rel) -> CpaPrediction:
    """Closest point of approach under constant relative velocity."""
    p = np.asarray(p_rel, dtype=float)
    v = np.asarray(v_rel, dtype=float)
    vv = np.sum(v * v, axis=-1)
    pv = np.sum(p * v, axis=-1)
    moving = vv > 0
    t = np.where(moving, np.maximum(0.0, -pv / np.where(moving, vv, 1.0)), 0.0)
    closest = p + t[..., None] * v
    return CpaPrediction(d_min_pred=np.linalg.norm(closest, axis=-1), t_cpa=t)


def relative(state: RobotState, obs: Obstacle):
    """World-frame (obstacle - robot) position and velocity."""
    return np.asarray(obs.p_o) - state.p, np.asarray(obs.v_o) - state.v_world


def spawn_obstacle(rng: np.random.Generator, band, geom: GeometryConfig, spawn: SpawnConfig,
                   radius: float, robot_p=(0.0, 0.0), t: float = 0.0,
                   kind: Kind | None = None, d_safe: float = 0.4) -> Obstacle:
    """Sample one projectile around the robot.

    ``band`` is the admissible reaction-time interval; speed is picked so that the
    spawn distance divided by speed falls inside it.
    """
    d0 = rng.uniform(*spawn.distance)
    theta = rng.uniform(0.0, 2.0 * np.pi)
    t_lo = max(float(band[0]), spawn.tr_min)
    t_hi = max(float(band[1]), t_lo)
    t_r = rng.uniform(t_lo, t_hi)
    u = rng.uniform()
    if kind is None:
        if u < spawn.nonthreat_fraction / 2:
            kind = Kind.STILL
        elif u < spawn.nonthreat_fraction:
            kind = Kind.NON_CENTRAL
        else:
            kind = Kind.THREAT
    radial = np.array([math.cos(theta), math.sin(theta)])
    perp = np.array([-radial[1], radial[0]])
    p_o = np.asarray(robot_p, dtype=float) + d0 * radial
    if kind == Kind.STILL:
        speed = rng.uniform(0.0, spawn.still_speed_max)
        phi = rng.uniform(0.0, 2.0 * np.pi)
        v_o = speed * np.array([math.cos(phi), math.sin(phi)])
        t_r = math.inf
    else:
        if kind == Kind.THREAT:
            offset = rng.uniform(-spawn.aim_jitter, spawn.aim_jitter)
        else:
            offset = rng.uniform(*spawn.noncentral_miss) * rng.choice([-1.0, 1.0])
        target = np.asarray(robot_p, dtype=float) + offset * perp
        direction = target - p_o
        direction /= np.linalg.norm(direction)
        v_o = (d0 / t_r) * direction
    obs = Obstacle(
        p_o=p_o, v_o=v_o, radius=np.array(float(radius)), kind=np.array(int(kind)),
        spawn_time=np.array(float(t)), reaction_time=np.array(float(t_r)),
    )
    if kind == Kind.NON_CENTRAL:
        pred = cpa_predict(p_o - np.asarray(robot_p, dtype=float), v_o)
        assert float(pred.d_min_pred) > d_safe
    return obs


def check_termination(state: RobotState, geom: GeometryConfig, obs: Obstacle, t,
                      *, min_clearance, closing_seen, cfg: SimConfig, step_clearance=None):
    """Classify the episode status after a step.

    ``min_clearance`` is the episode minimum including this step; ``closing_seen``
    marks that the obstacle has approached at some point (so a receding obstacle
    has actually passed its closest point).
    """
    if step_clearance is None:
        step_clearance = collision_distance(state, geom, obs)
    _, _, _, vmax, _ = mode_limits(state.mode_active, cfg)
    speed = np.linalg.norm(state.v_world, axis=-1)
    p_rel, v_rel = relative(state, obs)
    receding = np.sum(p_rel * v_rel, axis=-1) > 0.0
    out = np.full(np.shape(state.yaw), int(Outcome.RUNNING))
    out = np.where(np.asarray(t) >= cfg.horizon - 1e-9, int(Outcome.TIMEOUT), out)
    success = np.asarray(closing_seen) & receding & (np.asarray(min_clearance) > geom.delta_safe)
    out = np.where(success, int(Outcome.SUCCESS), out)
    unstable = (speed > cfg.instability_speed_factor * vmax) | (np.abs(state.yaw_rate) > cfg.instability_yaw_rate)
    out = np.where(unstable, int(Outcome.INSTABILITY), out)
    out = np.where(np.minimum(step_clearance, min_clearance) < 0.0, int(Outcome.COLLISION), out)
    return out
