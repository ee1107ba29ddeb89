"""Lanes of independent environments stepped together.

A lane always has the same width for a given config, so batched matrix products
see identical shapes no matter how lanes are spread over worker processes; this
keeps rollouts bit-reproducible for a fixed (seed, config).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import sim_core as sc
from . import threat as th
from .config import Config
from .policy_net import route_action
from .sim_core import Kind, Mode, Outcome
from .training.rewards import reward_regularizers, reward_task_batch
from .training.randomization import sample_dynamics

HIST = 5
N_PROPRIO = 13
N_OBS_LOW = HIST * 3 + N_PROPRIO
N_THREAT_FEATURES = 9  # kappa, p_rel, v_rel, predicted miss distance, time to CPA, CPA offset
N_OBS_HIGH = N_THREAT_FEATURES + N_PROPRIO
CPA_FEATURE_CAP = (5.0, 6.0)  # caps on predicted miss distance (m) and time to CPA (s)


def proprio(state: sc.RobotState) -> np.ndarray:
    vb = sc.to_body(state.v_world, state.yaw)
    onehot = np.stack([state.mode_active == Mode.LOW, state.mode_active == Mode.HIGH], axis=-1)
    return np.concatenate([vb, state.yaw_rate[..., None], state.channel_vel, onehot.astype(float)], axis=-1)


def obs_low(hist: np.ndarray, state: sc.RobotState) -> np.ndarray:
    return np.concatenate([hist.reshape(hist.shape[:-2] + (HIST * 3,)), proprio(state)], axis=-1)


def obs_high(state: sc.RobotState, obs: sc.Obstacle, ts: th.ThreatState) -> np.ndarray:
    p_b = sc.to_body(ts.p_rel, state.yaw)
    v_b = sc.to_body(ts.v_rel, state.yaw)
    cpa = sc.cpa_predict(p_b, v_b)
    t_cpa = np.minimum(cpa.t_cpa, CPA_FEATURE_CAP[1])
    d_min = np.minimum(cpa.d_min_pred, CPA_FEATURE_CAP[0])
    closest = p_b + t_cpa[..., None] * v_b
    closest = closest * (d_min / np.maximum(np.linalg.norm(closest, axis=-1), 1e-9))[..., None]
    return np.concatenate([ts.kappa[..., None], p_b, v_b, d_min[..., None], t_cpa[..., None], closest,
                           proprio(state)], axis=-1)


def accel_scale(mode, cfg: Config) -> np.ndarray:
    s = cfg.sim
    high = np.array([s.high_accel_x, s.high_accel_y, s.high_yaw_accel])
    low = np.array([s.low_accel, s.low_accel, s.low_yaw_accel])
    return np.where((np.asarray(mode) == Mode.HIGH)[..., None], high, low)


def command_limits(cfg: Config) -> np.ndarray:
    return np.array([cfg.sim.high_vmax, cfg.sim.high_vmax, cfg.sim.high_yaw_rate_max])


def expert_accel(experts, hist, state, mode, cfg: Config):
    """Deterministic routed expert output, scaled to body accelerations."""
    o = obs_low(hist, state)
    out_low = np.tanh(experts[0].act_mean(o))
    out_high = np.tanh(experts[1].act_mean(o))
    m = np.stack([mode == Mode.LOW, mode == Mode.HIGH], axis=-1).astype(float)
    return route_action(m, out_low, out_high) * accel_scale(mode, cfg)


@dataclass
class EpisodeSpec:
    """What a slot should run in evaluation: a seed path and an admissible band."""

    seed: tuple
    band: tuple
    kind: int | None = None
    index: int = 0
    group: str = ""


@dataclass
class EpisodeTrace:
    spec: EpisodeSpec | None
    t: np.ndarray
    p: np.ndarray
    yaw: np.ndarray
    v_world: np.ndarray
    yaw_rate: np.ndarray
    mode: np.ndarray
    v_cmd: np.ndarray
    accel: np.ndarray
    clearance: np.ndarray
    p_o: np.ndarray
    v_o: np.ndarray
    channel_vel: np.ndarray
    channel_torque: np.ndarray
    wheel_locked: np.ndarray
    alpha: np.ndarray
    kappa: np.ndarray
    xi_step: np.ndarray
    r_task: np.ndarray
    r_track: np.ndarray
    r_smooth: np.ndarray
    r_energy: np.ndarray
    outcome: int
    xi: bool
    kind: int
    reaction_time: float
    radius: float
    spawn_p_o: np.ndarray
    spawn_v_o: np.ndarray
    dyn: dict = field(default_factory=dict)


TRACE_FIELDS = (
    "t", "p", "yaw", "v_world", "yaw_rate", "mode", "v_cmd", "accel", "clearance", "p_o", "v_o",
    "channel_vel", "channel_torque", "wheel_locked", "alpha", "kappa", "xi_step",
    "r_task", "r_track", "r_smooth", "r_energy",
)


class Lane:
    """A fixed-width batch of evasion environments.

    ``mode='train'`` resets finished slots with a fresh spawn drawn from
    ``band_fn(rng)``; ``mode='eval'`` runs a fixed queue of episode specs, one per
    slot, and idles slots once done.
    """

    def __init__(self, cfg: Config, width: int, *, rngs=None, specs=None, record=False,
                 stage: int = 2, randomize: bool | None = None):
        self.cfg = cfg
        self.width = width
        self.stage = stage
        self.randomize = cfg.randomization.enabled if randomize is None else randomize
        self.record = record
        self.specs = specs
        self.robot = sc.initial_state(cfg.sim, (width,))
        self.obstacle = sc.Obstacle(
            p_o=np.full((width, 2), 1e3), v_o=np.zeros((width, 2)), radius=np.full(width, cfg.sim.obstacle_radius),
            kind=np.full(width, int(Kind.STILL)), spawn_time=np.zeros(width), reaction_time=np.full(width, np.inf))
        self.dyn = sc.Dynamics.nominal(cfg.sim, (width,))
        self.t = np.zeros(width)
        self.hist = np.zeros((width, HIST, 3))
        self.min_clear = np.full(width, np.inf)
        self.closing_seen = np.zeros(width, dtype=bool)
        self.xi = np.zeros(width, dtype=bool)
        self.band_flag = np.zeros(width, dtype=bool)
        self.active = np.ones(width, dtype=bool)
        self.fp_ever = np.zeros(width, dtype=bool)
        self.alpha_ever = np.zeros(width, dtype=bool)
        self.spawn_p_o = np.zeros((width, 2))
        self.spawn_v_o = np.zeros((width, 2))
        self.rngs = rngs
        self._buf: list = [[] for _ in range(width)]
        self.finished: list = []

    # ------------------------------------------------------------ episodes

    def reset_slot(self, i: int, band, kind=None, in_band: bool = True) -> None:
        cfg = self.cfg
        rng = self.rngs[i]
        single = sc.initial_state(cfg.sim)
        sc.assign(self.robot, i, single)
        obs = sc.spawn_obstacle(rng, band, cfg.geometry, cfg.spawn, cfg.sim.obstacle_radius,
                                kind=kind, d_safe=cfg.threat.d_safe)
        sc.assign(self.obstacle, i, obs)
        if self.randomize:
            sc.assign(self.dyn, i, sample_dynamics(rng, cfg))
        else:
            sc.assign(self.dyn, i, sc.Dynamics.nominal(cfg.sim))
        self.t[i] = 0.0
        self.hist[i] = 0.0
        self.min_clear[i] = np.inf
        self.closing_seen[i] = False
        p_rel, v_rel = sc.relative(single, obs)
        self.xi[i] = bool(th.assess(p_rel, v_rel, cfg.threat).xi)
        self.band_flag[i] = in_band
        self.fp_ever[i] = False
        self.alpha_ever[i] = False
        self.spawn_p_o[i] = obs.p_o
        self.spawn_v_o[i] = obs.v_o
        self.active[i] = True
        self._buf[i] = []

    def start_eval(self) -> None:
        """Load one spec per slot; slots beyond the spec list stay idle."""
        for i in range(self.width):
            if self.specs is not None and i < len(self.specs) and self.specs[i] is not None:
                sp = self.specs[i]
                self.rngs[i] = np.random.default_rng(np.random.SeedSequence(list(sp.seed)))
                self.reset_slot(i, sp.band, kind=sp.kind)
            else:
                self.rngs[i] = np.random.default_rng(0)
                self.reset_slot(i, (3.0, 3.0), kind=Kind.STILL)
                self.active[i] = False

    # ------------------------------------------------------------ stepping

    def threat_state(self) -> th.ThreatState:
        p_rel, v_rel = sc.relative(self.robot, self.obstacle)
        return th.assess(p_rel, v_rel, self.cfg.threat)

    def observe_high(self):
        ts = self.threat_state()
        return obs_high(self.robot, self.obstacle, ts), ts

    def push_command(self, v_cmd) -> np.ndarray:
        prev = self.hist[:, -1].copy()
        self.hist = np.concatenate([self.hist[:, 1:], v_cmd[:, None, :]], axis=1)
        return prev

    def advance(self, v_cmd, mode, accel, v_prev, ts: th.ThreatState, fp_stage: bool = True):
        """Integrate one step. Returns per-slot (reward breakdown dict, done, outcome)."""
        cfg = self.cfg
        state0, obs0 = self.robot, self.obstacle
        t_next = self.t + cfg.sim.dt
        state1 = sc.step(state0, accel, mode, cfg.sim, dyn=self.dyn, t=self.t)
        obs1 = sc.step_obstacle(obs0, cfg.sim.dt)
        step_clear = sc.swept_clearance(state0, obs0, state1, obs1, cfg.geometry)
        end_clear = sc.collision_distance(state1, cfg.geometry, obs1)
        self.min_clear = np.minimum(self.min_clear, step_clear)
        self.closing_seen |= ts.kappa > 0.05
        outcome = sc.check_termination(
            state1, cfg.geometry, obs1, t_next, min_clearance=self.min_clear,
            closing_seen=self.closing_seen, cfg=cfg.sim, step_clearance=step_clear)
        outcome = np.where(self.active, outcome, int(Outcome.RUNNING))

        speed_cmd = np.linalg.norm(v_cmd, axis=-1)
        triggered = speed_cmd > cfg.threat.fp_deadband
        if not fp_stage:
            triggered = np.zeros_like(triggered)
        weights = cfg.reward.for_high_level()
        r_task, _ = reward_task_batch(outcome, self.min_clear, self.xi, triggered, v_cmd, weights,
                                      cfg.geometry.delta_safe)
        v_real = np.concatenate([sc.to_body(state1.v_world, state1.yaw), state1.yaw_rate[:, None]], axis=-1)
        r_track, r_smooth, r_energy = reward_regularizers(
            v_cmd, v_prev, v_real, state1.channel_torque, state1.channel_vel, weights)
        self.fp_ever |= self.active & ~self.xi & triggered
        self.alpha_ever |= self.active & ts.alpha

        if self.record:
            for i in np.flatnonzero(self.active):
                self._buf[i].append((
                    t_next[i], state1.p[i].copy(), state1.yaw[i], state1.v_world[i].copy(), state1.yaw_rate[i],
                    int(mode[i]), v_cmd[i].copy(), accel[i].copy(), end_clear[i], obs1.p_o[i].copy(),
                    obs1.v_o[i].copy(), state1.channel_vel[i].copy(), state1.channel_torque[i].copy(),
                    bool(state1.wheel_locked[i]), bool(ts.alpha[i]), ts.kappa[i], bool(ts.xi[i]),
                    r_task[i], r_track[i], r_smooth[i], r_energy[i],
                ))

        self.robot, self.obstacle, self.t = state1, obs1, t_next
        done = outcome != int(Outcome.RUNNING)
        rewards = {"task": r_task, "track": r_track, "smooth": r_smooth, "energy": r_energy}
        return rewards, done, outcome

    def pop_trace(self, i: int, outcome: int, spec=None) -> EpisodeTrace | None:
        buf = self._buf[i]
        self._buf[i] = []
        if not self.record:
            return None
        cols = list(zip(*buf)) if buf else [[] for _ in TRACE_FIELDS]
        arrays = {name: np.array(col) for name, col in zip(TRACE_FIELDS, cols)}
        return EpisodeTrace(
            spec=spec, outcome=int(outcome), xi=bool(self.xi[i]), kind=int(self.obstacle.kind[i]),
            reaction_time=float(self.obstacle.reaction_time[i]), radius=float(self.obstacle.radius[i]),
            spawn_p_o=self.spawn_p_o[i].copy(), spawn_v_o=self.spawn_v_o[i].copy(),
            dyn={"gain": float(self.dyn.gain[i]), "mass_scale": float(self.dyn.mass_scale[i]),
                 "friction": float(self.dyn.friction[i])},
            **arrays,
        )
