"""Task reward (four exclusive branches) and the feasibility regularisers."""

from __future__ import annotations

from enum import IntEnum

import numpy as np

from ..config import RewardConfig
from ..sim_core import Outcome

RewardWeights = RewardConfig


class Branch(IntEnum):
    SUCCESS = 0
    FAIL = 1
    FALSE_POSITIVE = 2
    OTHERWISE = 3


def reward_task(outcome, d_min, xi, avoidance_triggered, v_cmd, w: RewardConfig, d_safe: float):
    """Scalar task reward and the branch that produced it.

    Success and failure are terminal and paid once; the false-positive penalty is
    paid on every step a non-threat provokes a command outside the dead band.
    Loss of stability is scored as a failure.
    """
    r, b = reward_task_batch(np.asarray([outcome]), np.asarray([d_min]), np.asarray([xi]),
                             np.asarray([avoidance_triggered]), np.asarray([v_cmd], dtype=float), w, d_safe)
    return float(r[0]), Branch(int(b[0]))


def reward_task_batch(outcome, d_min, xi, triggered, v_cmd, w: RewardConfig, d_safe: float):
    outcome = np.asarray(outcome)
    d_min = np.asarray(d_min, dtype=float)
    xi = np.asarray(xi, dtype=bool)
    triggered = np.asarray(triggered, dtype=bool)
    v2 = np.sum(np.asarray(v_cmd, dtype=float) ** 2, axis=-1)
    succ = (outcome == Outcome.SUCCESS) & (d_min > d_safe) & xi
    fail = ~succ & ((d_min <= 0.0) | (outcome == Outcome.COLLISION) | (outcome == Outcome.INSTABILITY))
    fp = ~succ & ~fail & ~xi & triggered
    branch = np.full(outcome.shape, int(Branch.OTHERWISE))
    branch = np.where(fp, int(Branch.FALSE_POSITIVE), branch)
    branch = np.where(fail, int(Branch.FAIL), branch)
    branch = np.where(succ, int(Branch.SUCCESS), branch)
    r = np.zeros(outcome.shape)
    r = np.where(succ, w.R_succ, r)
    r = np.where(fail, w.R_fail, r)
    r = np.where(fp, -w.lambda_fp * v2, r)
    return r, branch


def reward_regularizers(v_cmd, v_cmd_prev, v_real, torque, joint_vel, w: RewardConfig):
    """(r_track, r_smooth, r_energy); each is <= 0."""
    v_cmd = np.asarray(v_cmd, dtype=float)
    r_track = -w.k_track * np.sum((v_cmd - np.asarray(v_real, dtype=float)) ** 2, axis=-1)
    r_smooth = -w.k_smooth * np.sum((v_cmd - np.asarray(v_cmd_prev, dtype=float)) ** 2, axis=-1)
    r_energy = -w.k_power * np.sum(np.abs(np.asarray(torque, dtype=float) * np.asarray(joint_vel, dtype=float)), axis=-1)
    return r_track, r_smooth, r_energy
