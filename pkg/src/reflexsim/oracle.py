"""Analytic CPA-based dodger: a non-learned baseline that shows the task is solvable."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import sim_core as sc
from .config import Config
from .sim_core import Mode


@dataclass
class OracleDodgerParams:
    dodge_speed: float = 2.0  # m/s, reached under the active envelope
    high_mode_tcpa: float = 1.5  # use the agile expert when contact is predicted sooner than this (s)
    velocity_gain: float = 12.0  # 1/s, proportional velocity tracking
    clearance_margin: float = 0.15  # m added on top of the geometric clearance


def dodge_direction(p_rel, v_rel) -> np.ndarray:
    """Unit vector perpendicular to ``v_rel``, pointing away from the predicted CPA point.

    ``p_rel`` is the obstacle position relative to the robot. A dead-centre
    approach breaks the tie towards the left of the obstacle's travel direction.
    """
    p = np.asarray(p_rel, dtype=float)
    v = np.asarray(v_rel, dtype=float)
    speed = np.linalg.norm(v, axis=-1, keepdims=True)
    u = v / np.where(speed > 0, speed, 1.0)
    perp = np.stack([-u[..., 1], u[..., 0]], axis=-1)
    cpa = sc.cpa_predict(p, v)
    closest = p + cpa.t_cpa[..., None] * v
    side = np.sum(closest * perp, axis=-1)
    sign = np.where(side > 0, -1.0, 1.0)
    return sign[..., None] * perp


def required_clearance(cfg: Config, radius) -> np.ndarray:
    """Centre distance that guarantees the box-to-disc clearance exceeds the safety margin."""
    g = cfg.geometry
    return np.asarray(radius) + np.hypot(g.half_length, g.half_width) + g.delta_safe


class OracleController:
    """Dodges once the activation trigger fires and the CPA predicts an intrusion.

    The dodge direction is latched at the first firing so the base commits to
    one side; the base then holds the dodge velocity until the episode ends.
    """

    def __init__(self, cfg: Config, params: OracleDodgerParams | None = None):
        self.cfg = cfg
        self.params = params or OracleDodgerParams()
        self.direction = None
        self.mode = None

    def reset(self, width: int) -> None:
        self.direction = np.zeros((width, 2))
        self.mode = np.full(width, int(Mode.LOW))

    def act(self, lane, obs, ts):
        cfg, prm = self.cfg, self.params
        if self.direction is None or len(self.direction) != lane.width:
            self.reset(lane.width)
        robot = lane.robot
        cpa = sc.cpa_predict(ts.p_rel, ts.v_rel)
        need = required_clearance(cfg, lane.obstacle.radius) + prm.clearance_margin
        fire = ts.alpha & (cpa.d_min_pred < need) & (ts.kappa > 0)
        fresh = fire & ~np.any(self.direction != 0.0, axis=1)
        if fresh.any():
            d = dodge_direction(ts.p_rel, ts.v_rel)
            self.direction[fresh] = d[fresh]
            self.mode[fresh] = np.where(cpa.t_cpa[fresh] < prm.high_mode_tcpa, int(Mode.HIGH), int(Mode.LOW))
        dodging = np.any(self.direction != 0.0, axis=1)
        v_world = prm.dodge_speed * self.direction
        v_body = sc.to_body(v_world, robot.yaw)
        v_cmd = np.concatenate([v_body, np.zeros((lane.width, 1))], axis=1)
        v_cmd[~dodging] = 0.0
        mode = np.where(dodging, self.mode, int(Mode.LOW))
        cur = sc.to_body(robot.v_world, robot.yaw)
        accel = np.empty((lane.width, 3))
        accel[:, :2] = prm.velocity_gain * (v_cmd[:, :2] - cur)
        accel[:, 2] = -prm.velocity_gain * robot.yaw_rate
        return v_cmd, mode, accel
