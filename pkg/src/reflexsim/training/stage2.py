"""Stage 2: train the high-level evasive policy on top of two frozen experts."""

from __future__ import annotations

import copy
import logging
import pickle
import time
from pathlib import Path

import numpy as np

from ..config import Config
from ..env import N_OBS_HIGH, N_THREAT_FEATURES, Lane, command_limits, expert_accel
from ..policy_net import (
    CheckpointError,
    HighLevelPolicy,
    command_mean,
    gaussian_logprob,
    gumbel_softmax_from_noise,
    load_checkpoint,
    log_softmax,
    save_checkpoint,
)
from .. import sim_core as sc
from ..sim_core import Kind, Mode, Outcome
from .common import DivergenceDetector, DivergenceError, MetricsWriter, assemble, slot_rngs, write_diagnostics
from .curriculum import CurriculumState, curriculum_update, sample_band
from .pool import LanePool
from .ppo import Adam, mode_logprob, ppo_update, trainable

log = logging.getLogger(__name__)

STAGE2_FIELDS = [
    "iteration", "env_steps", "episodes", "threat_episodes", "mean_return", "r_task", "r_track", "r_smooth",
    "r_energy", "r_shape", "asr_iter", "asr_window", "level", "band_lo", "band_hi", "promoted", "promotion_rate",
    "fp_rate_iter", "high_frac", "temperature", "kl", "clip_frac", "policy_loss", "value_loss", "entropy",
    "ratio_dev_first", "lr",
]


def gumbel_temperature(cfg: Config, it: int, n_iter: int) -> float:
    frac = min(1.0, it / max(n_iter - 1, 1))
    return cfg.net.gumbel_temp_start + frac * (cfg.net.gumbel_temp_end - cfg.net.gumbel_temp_start)


def high_level_act(policy: HighLevelPolicy, o, ts, cfg: Config, g_noise=None, u_noise=None, temperature=1.0,
                   held=None, decide=None):
    """Sample (or take the mode of) the high-level action and apply the activation gate.

    When ``decide`` is given, slots where it is false keep the ``held`` mode and
    their recorded mode index is -1 (no mode decision scored at that step).
    Returns raw Gaussian sample, recorded mode index, log-prob, value, executed
    command, executed mode and the policy-update mask.
    """
    gate_obs = cfg.threat.gate == "observation"
    alpha = ts.alpha
    if gate_obs:
        o = o.copy()
        o[~alpha, :N_THREAT_FEATURES] = 0.0
    on = policy.norm.transform(o)
    out = policy.net.forward(on)
    value = policy.value.forward(on)[:, 0]
    logits = out[:, 3:5]
    logstd = np.clip(policy.logstd, -5.0, 1.0)
    if u_noise is None:
        mode = np.argmax(logits, axis=1)
    else:
        gumbel = -np.log(-np.log(np.clip(u_noise, 1e-300, 1.0 - 1e-16)))
        _, hard = gumbel_softmax_from_noise(logits, gumbel, temperature)
        mode = np.argmax(hard, axis=1)
    if decide is not None:
        mode = np.where(decide, mode, held)
        recorded = np.where(decide, mode, -1)
    else:
        recorded = mode
    # the velocity command comes from the head of the mode in force
    mean = command_mean(out, mode)
    raw = mean if g_noise is None else mean + np.exp(logstd) * g_noise
    logp = gaussian_logprob(mean, logstd, raw) + mode_logprob(log_softmax(logits), recorded)
    lim = command_limits(cfg)
    v_cmd = np.clip(raw, -lim, lim)
    if gate_obs:
        mask = np.ones(len(o), dtype=bool)
        mode_exec = mode
    else:
        v_cmd = np.where(alpha[:, None], v_cmd, 0.0)
        mode_exec = np.where(alpha, mode, int(Mode.LOW))
        mask = alpha.copy()
    return raw, recorded, logp, value, v_cmd, mode_exec, mask


class HighLane(Lane):
    """Training lane: auto-resets slots with curriculum-driven spawns."""

    def __init__(self, cfg: Config, width: int, lane_idx: int):
        env_rngs, act_rngs = slot_rngs(cfg.train.seed, 2, lane_idx, width)
        super().__init__(cfg, width, rngs=env_rngs, stage=2)
        self.act_rngs = act_rngs
        self.lane_idx = lane_idx
        self.needs_reset = np.ones(width, dtype=bool)
        self.ep_return = np.zeros(width)
        self.ep_steps = np.zeros(width, dtype=int)
        self.ep_high = np.zeros(width, dtype=int)
        self.ep_trig = np.zeros(width, dtype=int)
        self.held_mode = np.zeros(width, dtype=int)
        self.hold_left = np.zeros(width, dtype=int)

    def _respawn(self, i, cs: CurriculumState):
        rng = self.rngs[i]
        band, in_band = sample_band(cs, rng, self.cfg.curriculum.replay_fraction)
        kind = Kind.NON_CENTRAL if rng.uniform() < self.cfg.train.stage2_extra_noncentral else None
        self.reset_slot(i, band, kind=kind, in_band=in_band)
        self.needs_reset[i] = False
        self.ep_return[i] = 0.0
        self.ep_steps[i] = self.ep_high[i] = self.ep_trig[i] = 0
        self.hold_left[i] = 0

    def collect(self, policy: HighLevelPolicy, experts, cs: CurriculumState, n_steps: int, temperature: float):
        cfg = self.cfg
        L = self.width
        for i in np.flatnonzero(self.needs_reset):
            self._respawn(i, cs)
        g_noise = np.stack([r.standard_normal((n_steps, 3)) for r in self.act_rngs], axis=1)
        u_noise = np.stack([r.uniform(size=(n_steps, 2)) for r in self.act_rngs], axis=1)
        buf = {k: [] for k in ("obs", "act", "mode", "head_mode", "logp", "value", "reward", "done", "mask")}
        terms = np.zeros(5)
        episodes = []
        for k in range(n_steps):
            o, ts = self.observe_high()
            decide = self.hold_left <= 0
            raw, mode, logp, value, v_cmd, mode_exec, mask = high_level_act(
                policy, o, ts, cfg, g_noise[k], u_noise[k], temperature, held=self.held_mode, decide=decide)
            # a mode choice is held for mode_hold triggered steps; untriggered steps force a fresh choice
            self.held_mode = np.where(decide, mode, self.held_mode)
            self.hold_left = np.where(ts.alpha, np.where(decide, cfg.train.mode_hold, self.hold_left) - 1, 0)
            v_prev = self.push_command(v_cmd)
            accel = expert_accel(experts, self.hist, self.robot, mode_exec, cfg)
            rewards, done, outcome = self.advance(v_cmd, mode_exec, accel, v_prev, ts)
            phi_next = np.where(done, 0.0, miss_potential(*sc.relative(self.robot, self.obstacle), cfg))
            rewards["shape"] = cfg.ppo.gamma * phi_next - miss_potential(ts.p_rel, ts.v_rel, cfg)
            reward = rewards["task"] + rewards["track"] + rewards["smooth"] + rewards["energy"] + rewards["shape"]
            terms += [rewards[n].sum() for n in ("task", "track", "smooth", "energy", "shape")]
            self.ep_return += reward
            self.ep_steps += 1
            self.ep_trig += ts.alpha
            self.ep_high += ts.alpha & (mode_exec == Mode.HIGH)
            for name, val in (("obs", o), ("act", raw), ("mode", mode), ("head_mode", self.held_mode.copy()),
                              ("logp", logp), ("value", value),
                              ("reward", reward), ("done", done.astype(float)), ("mask", mask.astype(float))):
                buf[name].append(val)
            for i in np.flatnonzero(done):
                episodes.append({
                    "step": k, "lane": self.lane_idx, "slot": int(i), "outcome": int(outcome[i]),
                    "kind": int(self.obstacle.kind[i]), "xi": bool(self.xi[i]), "in_band": bool(self.band_flag[i]),
                    "reaction_time": float(self.obstacle.reaction_time[i]), "return": float(self.ep_return[i]),
                    "fp": bool(self.fp_ever[i]), "trig_steps": int(self.ep_trig[i]), "high_steps": int(self.ep_high[i]),
                })
                self.pop_trace(i, outcome[i])
                self._respawn(i, cs)
        o, ts = self.observe_high()
        on = policy.norm.transform(o)
        out = {k: np.array(v) for k, v in buf.items()}
        out["last_value"] = policy.value.forward(on)[:, 0]
        out["terms"] = terms
        out["episodes"] = episodes
        return out


def miss_potential(p_rel, v_rel, cfg: Config) -> np.ndarray:
    """Shaping potential: weighted predicted miss distance, capped so distant misses earn nothing more."""
    w = cfg.reward
    return w.shape_weight * np.minimum(sc.cpa_predict(p_rel, v_rel).d_min_pred, w.shape_cap)


def load_experts(low_ckpt, high_ckpt, cfg: Config):
    experts = []
    for path, kind in ((low_ckpt, "expert_low"), (high_ckpt, "expert_high")):
        if path is None or not Path(path).exists():
            raise CheckpointError(f"missing expert checkpoint: {path}")
        pol, _ = load_checkpoint(path, expected_config_hash=cfg.model_hash(), kind=kind)
        experts.append(pol)
    return experts


def train_stage2(low_ckpt, high_ckpt, cfg: Config, out_dir, workers: int = 1, resume: bool = True,
                 iterations: int | None = None) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    experts = load_experts(low_ckpt, high_ckpt, cfg)
    frozen = [e.parameter_hash() for e in experts]
    tc, pc = cfg.train, cfg.ppo
    n_iter = tc.stage2_iterations if iterations is None else iterations
    state_path = out_dir / "high_level_state.pkl"
    ckpt_path = out_dir / "high_level.npz"
    cfg_hash = cfg.model_hash()

    if resume and state_path.exists():
        with state_path.open("rb") as f:
            st = pickle.load(f)
        policy, lanes, opt_state, rng, start, detector, cs = (
            st["policy"], st["lanes"], st["opt"], st["rng"], st["iteration"], st["detector"], st["curriculum"])
        log.info("resuming high-level training at iteration %d", start)
    else:
        init_rng = np.random.default_rng(np.random.SeedSequence([tc.seed, 300]))
        policy = HighLevelPolicy.create(N_OBS_HIGH, cfg.net.high_hidden, init_rng, cfg.net.init_logstd,
                                        cfg.net.low_mode_prior)
        lanes = [HighLane(cfg, tc.lane_size, i) for i in range(tc.lanes)]
        rng = np.random.default_rng(np.random.SeedSequence([tc.seed, 301]))
        opt_state, start = None, 0
        detector = DivergenceDetector(tc.divergence_window, tc.divergence_drop)
        cs = CurriculumState.initial(cfg.curriculum)
    opt = Adam(trainable(policy), lr=pc.lr)
    if opt_state is not None:
        opt.load(opt_state)
    metrics = MetricsWriter(out_dir / "high_level_metrics.csv", STAGE2_FIELDS, resume=start > 0)
    if start > 0:
        metrics.truncate_after(start - 1)

    t0 = time.time()
    with LanePool(lanes, workers) as pool:
        for it in range(start, n_iter):
            temp = gumbel_temperature(cfg, it, n_iter)
            snapshot = copy.deepcopy(cs)
            results = pool.run("collect", policy, experts, snapshot, tc.rollout_steps, temp)
            batch = assemble(results, pc.gamma, pc.lam)
            lr = pc.lr * (1.0 - it / max(n_iter, 1))
            stats = ppo_update(policy, batch, pc, opt, rng, lr=lr)
            policy.norm.partial_fit(batch.obs[batch.mask])

            episodes = sorted((e for r in results for e in r["episodes"]),
                              key=lambda e: (e["step"], e["lane"], e["slot"]))
            level_before = cs.level
            promotion_rate = ""
            for e in episodes:
                if e["kind"] == Kind.THREAT and e["in_band"]:
                    n_before = len(cs.promotions)
                    curriculum_update(cs, e["outcome"] == Outcome.SUCCESS)
                    if len(cs.promotions) > n_before:
                        promotion_rate = cs.promotions[-1][1]
            threats = [e for e in episodes if e["kind"] == Kind.THREAT]
            nonthreat = [e for e in episodes if not e["xi"]]
            trig = sum(e["trig_steps"] for e in threats)
            n = len(batch)
            terms = sum(r["terms"] for r in results) / n
            returns = [e["return"] for e in episodes]
            mean_ret = float(np.mean(returns)) if returns else 0.0
            row = {
                "iteration": it, "env_steps": (it + 1) * n, "episodes": len(episodes),
                "threat_episodes": len(threats), "mean_return": mean_ret,
                "r_task": terms[0], "r_track": terms[1], "r_smooth": terms[2], "r_energy": terms[3], "r_shape": terms[4],
                "asr_iter": float(np.mean([e["outcome"] == Outcome.SUCCESS for e in threats])) if threats else "",
                "asr_window": cs.success_rate, "level": cs.level, "band_lo": cs.tr_band[0], "band_hi": cs.tr_band[1],
                "promoted": int(cs.level > level_before), "promotion_rate": promotion_rate,
                "fp_rate_iter": float(np.mean([e["fp"] for e in nonthreat])) if nonthreat else "",
                "high_frac": (sum(e["high_steps"] for e in threats) / trig) if trig else "",
                "temperature": temp, "lr": lr, **stats,
            }
            metrics.write(row)
            if returns:
                reason = detector.update(mean_ret)
                if reason:
                    diag = write_diagnostics(out_dir, "high_level_divergence.json", {"reason": reason, "row": row})
                    raise DivergenceError(reason, diag)
            last = it + 1 == n_iter
            if last or (it + 1) % tc.checkpoint_every == 0:
                save_checkpoint(ckpt_path, policy, "high_level", cfg_hash,
                                {"iteration": it + 1, "level": cs.level, "expert_hashes": frozen})
                with state_path.open("wb") as f:
                    pickle.dump({"policy": policy, "lanes": pool.lanes(), "opt": opt.state(), "rng": rng,
                                 "iteration": it + 1, "detector": detector, "curriculum": cs}, f)
            log.info("high it %d ret %.2f asr %s lvl %d fp %s high %s (%.0fs)", it, mean_ret, row["asr_iter"],
                     cs.level, row["fp_rate_iter"], row["high_frac"], time.time() - t0)
    if [e.parameter_hash() for e in experts] != frozen:
        raise RuntimeError("expert parameters changed during high-level training")
    if start >= n_iter and not ckpt_path.exists():
        save_checkpoint(ckpt_path, policy, "high_level", cfg_hash, {"iteration": start, "level": cs.level,
                                                                    "expert_hashes": frozen})
    return ckpt_path
