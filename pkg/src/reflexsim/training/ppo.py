"""Generalised advantage estimation, Adam and the clipped-surrogate PPO update."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..config import PPOConfig
from ..policy_net import (
    LOGSTD_MAX,
    LOGSTD_MIN,
    command_mean,
    gaussian_logprob,
    gaussian_logprob_grad,
    log_softmax,
)


class PPOError(RuntimeError):
    pass


def gae(rewards, values, dones, gamma, lam, last_value=None):
    """Advantages and returns; arrays may be (T,) or (T, N)."""
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    dones = np.asarray(dones, dtype=float)
    if not (rewards.shape == values.shape == dones.shape):
        raise ValueError(f"length mismatch: {rewards.shape} {values.shape} {dones.shape}")
    T = rewards.shape[0]
    if last_value is None:
        last_value = np.zeros(rewards.shape[1:])
    adv = np.zeros_like(rewards)
    running = np.zeros(rewards.shape[1:])
    for t in reversed(range(T)):
        next_v = last_value if t == T - 1 else values[t + 1]
        live = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_v * live - values[t]
        running = delta + gamma * lam * live * running
        adv[t] = running
    return adv, adv + values


class Adam:
    def __init__(self, params, lr=3e-4, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads, lr=None):
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state(self) -> dict:
        return {"t": self.t, "m": [a.copy() for a in self.m], "v": [a.copy() for a in self.v]}

    def load(self, st: dict) -> None:
        self.t = int(st["t"])
        for dst, src in zip(self.m, st["m"]):
            dst[...] = src
        for dst, src in zip(self.v, st["v"]):
            dst[...] = src


@dataclass
class Batch:
    obs: np.ndarray
    act: np.ndarray
    logp: np.ndarray
    adv: np.ndarray
    ret: np.ndarray
    mask: np.ndarray
    mode: np.ndarray | None = None
    head_mode: np.ndarray | None = None  # mode whose velocity head produced ``act``

    def __len__(self) -> int:
        return len(self.obs)

    def take(self, idx) -> "Batch":
        return Batch(self.obs[idx], self.act[idx], self.logp[idx], self.adv[idx], self.ret[idx],
                     self.mask[idx], None if self.mode is None else self.mode[idx],
                     None if self.head_mode is None else self.head_mode[idx])


def trainable(policy) -> list:
    return policy.net.params() + [policy.logstd] + policy.value.params()


def _head_mode(mode, head_mode):
    if head_mode is not None:
        return np.asarray(head_mode)
    return None if mode is None else np.maximum(np.asarray(mode), 0)


def policy_logprob(policy, obs_n, act, mode=None, head_mode=None):
    out = policy.net.forward(obs_n)
    logstd = np.clip(policy.logstd, LOGSTD_MIN, LOGSTD_MAX)
    lp = gaussian_logprob(command_mean(out, _head_mode(mode, head_mode)), logstd, act)
    if mode is not None:
        lp = lp + mode_logprob(log_softmax(out[:, 3:5]), mode)
    return lp


def mode_logprob(lsm, mode):
    """Log-probability of the chosen mode; steps marked -1 carry no mode decision and score 0."""
    mode = np.asarray(mode)
    picked = np.take_along_axis(lsm, np.maximum(mode, 0)[:, None], axis=1)[:, 0]
    return np.where(mode >= 0, picked, 0.0)


def ppo_loss_and_grads(policy, mb: Batch, cfg: PPOConfig):
    """Loss and gradients (``trainable`` order) for one minibatch.

    The mode head is scored by its exact categorical likelihood, which is the
    law of the Gumbel-max hard sample; steps with mode -1 hold an earlier
    choice and add nothing to the mode term.
    """
    obs_n = policy.norm.transform(mb.obs)
    out, cache = policy.net.forward(obs_n, return_cache=True)
    ls_raw = policy.logstd
    logstd = np.clip(ls_raw, LOGSTD_MIN, LOGSTD_MAX)
    head = _head_mode(mb.mode, mb.head_mode)
    mean = command_mean(out, head)
    lp = gaussian_logprob(mean, logstd, mb.act)
    has_mode = mb.mode is not None
    if has_mode:
        lsm = log_softmax(out[:, 3:5])
        probs = np.exp(lsm)
        decided = (mb.mode >= 0).astype(float)
        lp = lp + mode_logprob(lsm, mb.mode)

    w = mb.mask.astype(float)
    n_act = max(w.sum(), 1.0)
    ratio = np.exp(lp - mb.logp)
    clipped = np.clip(ratio, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps)
    s1 = ratio * mb.adv
    s2 = clipped * mb.adv
    surr = np.minimum(s1, s2)
    pol_loss = -np.sum(w * surr) / n_act
    # gradient flows only through the unclipped branch when it is the active minimum
    d_lp = -(w * np.where(s1 <= s2, s1, 0.0)) / n_act

    ent = float(np.sum(logstd + 0.5 * (1.0 + np.log(2.0 * np.pi))))
    ent_mode = 0.0
    g_out = np.zeros_like(out)
    g_mean, g_ls = gaussian_logprob_grad(mean, logstd, mb.act)
    g_act = d_lp[:, None] * g_mean
    if out.shape[1] >= 8 and head is not None:
        high = (head == 1)[:, None]
        g_out[:, :3] = np.where(high, 0.0, g_act)
        g_out[:, 5:8] = np.where(high, g_act, 0.0)
    else:
        g_out[:, :3] = g_act
    g_logstd = np.sum(d_lp[:, None] * g_ls, axis=0) - cfg.entropy_coef * np.ones(3)
    if has_mode:
        onehot = np.zeros_like(probs)
        onehot[np.arange(len(probs)), np.maximum(mb.mode, 0)] = 1.0
        g_out[:, 3:5] = (d_lp * decided)[:, None] * (onehot - probs)
        # the categorical entropy bonus, like the mode score, acts only where a mode was drawn
        wd = w * decided
        h_cat = -np.sum(probs * lsm, axis=1)
        ent_mode = float(np.sum(wd * h_cat) / n_act)
        dh = -probs * (lsm + h_cat[:, None])
        g_out[:, 3:5] -= cfg.mode_entropy_coef * (wd[:, None] * dh) / n_act
    inside = (ls_raw > LOGSTD_MIN) & (ls_raw < LOGSTD_MAX)
    g_logstd = np.where(inside, g_logstd, 0.0)
    pi_grads, _ = policy.net.backward(cache, g_out)

    v, vcache = policy.value.forward(obs_n, return_cache=True)
    v = v[:, 0]
    err = v - mb.ret
    val_loss = float(np.mean(err ** 2))
    v_grads, _ = policy.value.backward(vcache, (cfg.value_coef * 2.0 * err / len(err))[:, None])

    loss = pol_loss + cfg.value_coef * val_loss - cfg.entropy_coef * ent - cfg.mode_entropy_coef * ent_mode
    stats = {
        "policy_loss": float(pol_loss), "value_loss": val_loss, "entropy": ent + ent_mode,
        "kl": float(np.sum(w * (mb.logp - lp)) / n_act),
        "clip_frac": float(np.sum(w * (np.abs(ratio - 1.0) > cfg.clip_eps)) / n_act),
        "ratio_dev": float(np.max(np.abs(ratio - 1.0) * w)) if len(w) else 0.0,
    }
    return float(loss), pi_grads + [g_logstd] + v_grads, stats


def ppo_update(policy, batch: Batch, cfg: PPOConfig, opt: Adam, rng: np.random.Generator,
               lr: float | None = None, normalize_adv: bool = True):
    """Several epochs of minibatch Adam steps on the clipped surrogate; returns stats."""
    if normalize_adv:
        w = batch.mask.astype(bool)
        if w.any():
            mu = batch.adv[w].mean()
            sd = batch.adv[w].std() + 1e-8
            batch = Batch(batch.obs, batch.act, batch.logp, (batch.adv - mu) / sd, batch.ret, batch.mask, batch.mode,
                          batch.head_mode)
    params = trainable(policy)
    n = len(batch)
    mb_size = min(cfg.minibatch, n)
    agg: dict = {}
    first = None
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for k, start in enumerate(range(0, n - mb_size + 1, mb_size)):
            mb = batch.take(order[start:start + mb_size])
            loss, grads, st = ppo_loss_and_grads(policy, mb, cfg)
            if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
                raise PPOError(f"non-finite loss in epoch {epoch}, minibatch {k}")
            if first is None:
                first = st["ratio_dev"]
            gnorm = np.sqrt(sum(float(np.sum(g * g)) for g in grads))
            if cfg.max_grad_norm and gnorm > cfg.max_grad_norm:
                grads = [g * (cfg.max_grad_norm / gnorm) for g in grads]
            opt.step(grads, lr)
            st["grad_norm"] = gnorm
            for key, val in st.items():
                agg.setdefault(key, []).append(val)
    out = {k: float(np.mean(v)) for k, v in agg.items()}
    out["ratio_dev_first"] = float(first if first is not None else 0.0)
    assert params is not None
    return out
