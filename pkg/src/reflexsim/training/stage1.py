"""Stage 1: train one low-level expert to track piecewise-constant velocity targets."""

from __future__ import annotations

import logging
import pickle
import time
from pathlib import Path

import numpy as np

from .. import sim_core as sc
from ..config import Config
from ..env import HIST, N_OBS_LOW, accel_scale, obs_low
from ..policy_net import ExpertPolicy, gaussian_logprob, save_checkpoint
from ..sim_core import Mode
from .common import DivergenceDetector, DivergenceError, MetricsWriter, assemble, slot_rngs, write_diagnostics
from .pool import LanePool
from .ppo import Adam, ppo_update, trainable
from .randomization import sample_dynamics
from .rewards import reward_regularizers

log = logging.getLogger(__name__)

STAGE1_FIELDS = [
    "iteration", "env_steps", "episodes", "mean_return", "r_track", "r_smooth", "r_energy",
    "track_rmse", "kl", "clip_frac", "policy_loss", "value_loss", "entropy", "ratio_dev_first", "lr",
]


def sample_target(rng, mode: Mode, current, cfg: Config, brake_prob: float):
    """Next velocity target, reached from ``current`` by an envelope-bounded acceleration."""
    s = cfg.sim
    tc = cfg.train
    if mode == Mode.HIGH:
        if np.hypot(current[0], current[1]) > 0.5 and rng.uniform() < brake_prob:
            return np.zeros(3)
        ax = rng.uniform(1.0, s.high_accel_x) * rng.choice([-1.0, 1.0])
        ay = rng.uniform(1.0, s.high_accel_y) * rng.choice([-1.0, 1.0])
        pick = rng.integers(3)
        a = np.array([ax if pick != 1 else 0.0, ay if pick != 0 else 0.0])
        vmax, wmax = s.high_vmax, s.high_yaw_rate_max
    else:
        if rng.uniform() < 0.15:
            return np.zeros(3)
        phi = rng.uniform(0.0, 2.0 * np.pi)
        a = rng.uniform(0.0, s.low_accel) * np.array([np.cos(phi), np.sin(phi)])
        vmax, wmax = s.low_vmax, s.low_yaw_rate_max
    v = np.asarray(current[:2]) + a * tc.stage1_ramp
    speed = np.hypot(v[0], v[1])
    if speed > vmax:
        v = v * (vmax / speed)
    w = rng.uniform(-0.6, 0.6) * wmax if rng.uniform() < 0.3 else 0.0
    return np.array([v[0], v[1], w])


class ExpertLane:
    def __init__(self, cfg: Config, width: int, mode: Mode, lane_idx: int):
        self.cfg = cfg
        self.width = width
        self.mode = Mode(mode)
        self.env_rngs, self.act_rngs = slot_rngs(cfg.train.seed, 10 + int(mode), lane_idx, width)
        self.robot = sc.initial_state(cfg.sim, (width,))
        self.dyn = sc.Dynamics.nominal(cfg.sim, (width,))
        self.t = np.zeros(width)
        self.hist = np.zeros((width, HIST, 3))
        self.target = np.zeros((width, 3))
        self.next_switch = np.zeros(width)
        self.ep_return = np.zeros(width)
        for i in range(width):
            self._reset(i)

    def _reset(self, i):
        cfg = self.cfg
        sc.assign(self.robot, i, sc.initial_state(cfg.sim))
        if cfg.randomization.enabled:
            sc.assign(self.dyn, i, sample_dynamics(self.env_rngs[i], cfg))
        self.t[i] = 0.0
        self.hist[i] = 0.0
        self.target[i] = 0.0
        self.next_switch[i] = self.env_rngs[i].uniform(0.0, 0.5)
        self.ep_return[i] = 0.0

    def collect(self, policy: ExpertPolicy, n_steps: int) -> dict:
        cfg = self.cfg
        L = self.width
        noise = np.stack([r.standard_normal((n_steps, 3)) for r in self.act_rngs], axis=1)
        mode = np.full(L, int(self.mode))
        scale = accel_scale(mode, cfg)
        buf = {k: [] for k in ("obs", "act", "logp", "value", "reward", "done", "mask")}
        terms = np.zeros(3)
        sq_err = 0.0
        returns = []
        for k in range(n_steps):
            switch = self.t >= self.next_switch
            for i in np.flatnonzero(switch):
                rng = self.env_rngs[i]
                self.target[i] = sample_target(rng, self.mode, self.target[i], cfg, cfg.train.stage1_brake_prob)
                self.next_switch[i] = self.t[i] + rng.uniform(*cfg.train.stage1_hold)
            v_prev = self.hist[:, -1].copy()
            self.hist = np.concatenate([self.hist[:, 1:], self.target[:, None, :]], axis=1)
            o = obs_low(self.hist, self.robot)
            on = policy.norm.transform(o)
            mean = policy.net.forward(on)
            value = policy.value.forward(on)[:, 0]
            logstd = np.clip(policy.logstd, -5.0, 1.0)
            u = mean + np.exp(logstd) * noise[k]
            logp = gaussian_logprob(mean, logstd, u)
            accel = np.tanh(u) * scale
            self.robot = sc.step(self.robot, accel, mode, cfg.sim, dyn=self.dyn, t=self.t)
            self.t = self.t + cfg.sim.dt
            v_real = np.concatenate([sc.to_body(self.robot.v_world, self.robot.yaw),
                                     self.robot.yaw_rate[:, None]], axis=-1)
            r_tr, r_sm, r_en = reward_regularizers(self.target, v_prev, v_real, self.robot.channel_torque,
                                                   self.robot.channel_vel, cfg.reward)
            reward = r_tr + r_sm + r_en
            terms += [r_tr.sum(), r_sm.sum(), r_en.sum()]
            sq_err += float(np.sum((self.target[:, :2] - v_real[:, :2]) ** 2))
            self.ep_return += reward
            done = self.t >= cfg.train.stage1_episode - 1e-9
            for name, val in (("obs", o), ("act", u), ("logp", logp), ("value", value), ("reward", reward),
                              ("done", done.astype(float)), ("mask", np.ones(L))):
                buf[name].append(val)
            for i in np.flatnonzero(done):
                returns.append(float(self.ep_return[i]))
                self._reset(i)
        o = obs_low(np.concatenate([self.hist[:, 1:], self.target[:, None, :]], axis=1), self.robot)
        last_value = policy.value.forward(policy.norm.transform(o))[:, 0]
        out = {k: np.array(v) for k, v in buf.items()}
        out["last_value"] = last_value
        out["terms"] = terms
        out["sq_err"] = sq_err
        out["returns"] = returns
        return out


def expert_kind(mode: Mode) -> str:
    return "expert_low" if Mode(mode) == Mode.LOW else "expert_high"


def train_stage1(mode: Mode, cfg: Config, out_dir, workers: int = 1, resume: bool = True,
                 iterations: int | None = None) -> Path:
    """PPO on velocity tracking for one expert; returns the final checkpoint path."""
    mode = Mode(mode)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    kind = expert_kind(mode)
    tc, pc = cfg.train, cfg.ppo
    n_iter = tc.stage1_iterations if iterations is None else iterations
    state_path = out_dir / f"{kind}_state.pkl"
    ckpt_path = out_dir / f"{kind}.npz"
    cfg_hash = cfg.model_hash()

    if resume and state_path.exists():
        with state_path.open("rb") as f:
            st = pickle.load(f)
        policy, lanes, opt_state, rng, start, detector = (
            st["policy"], st["lanes"], st["opt"], st["rng"], st["iteration"], st["detector"])
        log.info("resuming %s at iteration %d", kind, start)
    else:
        init_rng = np.random.default_rng(np.random.SeedSequence([tc.seed, 100 + int(mode)]))
        policy = ExpertPolicy.create(N_OBS_LOW, cfg.net.expert_hidden, init_rng, cfg.net.init_logstd)
        lanes = [ExpertLane(cfg, tc.lane_size, mode, i) for i in range(tc.lanes)]
        rng = np.random.default_rng(np.random.SeedSequence([tc.seed, 200 + int(mode)]))
        opt_state, start = None, 0
        detector = DivergenceDetector(tc.divergence_window, tc.divergence_drop)
    opt = Adam(trainable(policy), lr=pc.lr)
    if opt_state is not None:
        opt.load(opt_state)
    metrics = MetricsWriter(out_dir / f"{kind}_metrics.csv", STAGE1_FIELDS, resume=start > 0)
    if start > 0:
        metrics.truncate_after(start - 1)

    t0 = time.time()
    with LanePool(lanes, workers) as pool:
        for it in range(start, n_iter):
            results = pool.run("collect", policy, tc.rollout_steps)
            batch = assemble(results, pc.gamma, pc.lam)
            lr = pc.lr * (1.0 - it / max(n_iter, 1))
            stats = ppo_update(policy, batch, pc, opt, rng, lr=lr)
            policy.norm.partial_fit(batch.obs)
            n = len(batch)
            returns = [x for r in results for x in r["returns"]]
            terms = sum(r["terms"] for r in results) / n
            mean_ret = float(np.mean(returns)) if returns else float(np.mean(batch.ret))
            row = {
                "iteration": it, "env_steps": (it + 1) * n, "episodes": len(returns), "mean_return": mean_ret,
                "r_track": terms[0], "r_smooth": terms[1], "r_energy": terms[2],
                "track_rmse": float(np.sqrt(sum(r["sq_err"] for r in results) / n)),
                "lr": lr, **stats,
            }
            metrics.write(row)
            if returns:
                reason = detector.update(mean_ret)
                if reason:
                    diag = write_diagnostics(out_dir, f"{kind}_divergence.json", {"reason": reason, "row": row})
                    raise DivergenceError(reason, diag)
            last = it + 1 == n_iter
            if last or (it + 1) % tc.checkpoint_every == 0:
                save_checkpoint(ckpt_path, policy, kind, cfg_hash, {"iteration": it + 1})
                with state_path.open("wb") as f:
                    pickle.dump({"policy": policy, "lanes": pool.lanes(), "opt": opt.state(), "rng": rng,
                                 "iteration": it + 1, "detector": detector}, f)
            log.info("%s it %d ret %.3f rmse %.3f (%.0fs)", kind, it, mean_ret, row["track_rmse"], time.time() - t0)
    if start >= n_iter and not ckpt_path.exists():
        save_checkpoint(ckpt_path, policy, kind, cfg_hash, {"iteration": start})
    return ckpt_path
